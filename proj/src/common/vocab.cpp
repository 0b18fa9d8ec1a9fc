#include "ett/vocab.hpp"

#include <fstream>
#include <sstream>

#include "ett/error.hpp"

namespace ett {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        const auto id = static_cast<std::int64_t>(i);
        const auto& t = tokens_[i];
        if (t == kBoi) {
            boi_ = id;
        } else if (t == kEoi) {
            eoi_ = id;
        } else if (t == kEos) {
            eos_ = id;
        } else if (t.size() == 1) {
            char_ids_[t[0]] = id;
        } else {
            throw Error(ErrorCode::config, "vocabulary token '" + t + "' is neither a character nor a special token");
        }
    }
    if (boi_ < 0 || eoi_ < 0 || eos_ < 0) throw Error(ErrorCode::config, "vocabulary lacks special tokens");
}

Vocab Vocab::from_alphabet(std::string_view alphabet) {
    std::vector<std::string> tokens;
    for (char c : alphabet) tokens.emplace_back(1, c);
    tokens.emplace_back(kBoi);
    tokens.emplace_back(kEoi);
    tokens.emplace_back(kEos);
    return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot read vocabulary " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocab(std::move(tokens));
}

std::string Vocab::text() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    out << text();
    if (!out) throw Error(ErrorCode::io, "cannot write vocabulary " + path);
}

std::vector<std::int64_t> Vocab::encode(std::string_view text) const {
    std::vector<std::int64_t> ids;
    ids.reserve(text.size());
    for (char c : text) {
        auto it = char_ids_.find(c);
        if (it == char_ids_.end()) {
            throw Error(ErrorCode::invalid_argument, std::string("unknown token '") + c + "'");
        }
        ids.push_back(it->second);
    }
    return ids;
}

std::string Vocab::decode(const std::vector<std::int64_t>& ids) const {
    std::string out;
    for (auto id : ids) {
        if (id < 0 || id >= size() || id == boi_ || id == eoi_ || id == eos_) break;
        out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
}

}  // namespace ett
