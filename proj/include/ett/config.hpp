#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ett {

// Flat `key = value` settings with `#` comments. Every key must be declared
// with a default before values are read; unknown keys are rejected.
class Settings {
public:
    // Declares a key and its default value.
    void declare(const std::string& key, std::string default_value);
    bool declared(const std::string& key) const { return values_.count(key) != 0; }

    // Parses text; errors name the line number and key.
    void parse(std::string_view text, const std::string& source = "<config>");
    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);

    const std::string& str(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    double real(const std::string& key) const;
    bool boolean(const std::string& key) const;
    std::vector<std::string> list(const std::string& key) const;  // comma separated

    // Canonical text: every key in sorted order. Stable for hashing.
    std::string canonical() const;
    // Only keys whose value differs from the default.
    std::map<std::string, std::string> overrides() const;
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> defaults_;
};

std::string trim(std::string_view s);

}  // namespace ett
