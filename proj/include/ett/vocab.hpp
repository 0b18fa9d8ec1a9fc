#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ett {

// Character-level text vocabulary. Special tokens come last; a token's id is
// its line number in the vocabulary file.
class Vocab {
public:
    static constexpr std::string_view kBoi = "<boi>";
    static constexpr std::string_view kEoi = "<eoi>";
    static constexpr std::string_view kEos = "<eos>";

    static Vocab from_alphabet(std::string_view alphabet);
    static Vocab load(const std::string& path);
    void save(const std::string& path) const;

    std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
    std::int64_t boi() const { return boi_; }
    std::int64_t eoi() const { return eoi_; }
    std::int64_t eos() const { return eos_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // Throws on characters outside the vocabulary.
    std::vector<std::int64_t> encode(std::string_view text) const;
    // Stops at the first special token.
    std::string decode(const std::vector<std::int64_t>& ids) const;
    std::string text() const;  // file contents

private:
    explicit Vocab(std::vector<std::string> tokens);

    std::vector<std::string> tokens_;
    std::unordered_map<char, std::int64_t> char_ids_;
    std::int64_t boi_ = -1;
    std::int64_t eoi_ = -1;
    std::int64_t eos_ = -1;
};

}  // namespace ett
