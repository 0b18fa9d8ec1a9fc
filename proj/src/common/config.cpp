#include "ett/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ett/error.hpp"

namespace ett {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

void Settings::declare(const std::string& key, std::string default_value) {
    defaults_[key] = default_value;
    values_[key] = std::move(default_value);
}

void Settings::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error(ErrorCode::config, "unknown config key '" + key + "'");
    it->second = value;
}

void Settings::parse(std::string_view text, const std::string& source) {
    std::istringstream in{std::string(text)};
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::config, source + ":" + std::to_string(number) + ": expected 'key = value'");
        }
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        if (!declared(key)) {
            throw Error(ErrorCode::config, source + ":" + std::to_string(number) + ": unknown config key '" + key + "'");
        }
        values_[key] = value;
    }
}

void Settings::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::io, "cannot read config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    parse(ss.str(), path);
}

const std::string& Settings::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw Error(ErrorCode::config, "config key '" + key + "' was never declared");
    return it->second;
}

std::int64_t Settings::integer(const std::string& key) const {
    const std::string& v = str(key);
    errno = 0;
    char* end = nullptr;
    const long long out = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || errno != 0 || *end != '\0') {
        throw Error(ErrorCode::config, "config key '" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
}

double Settings::real(const std::string& key) const {
    const std::string& v = str(key);
    errno = 0;
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || errno != 0 || *end != '\0') {
        throw Error(ErrorCode::config, "config key '" + key + "' expects a number, got '" + v + "'");
    }
    return out;
}

bool Settings::boolean(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorCode::config, "config key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<std::string> Settings::list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::string t = trim(item);
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

std::string Settings::canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

std::map<std::string, std::string> Settings::overrides() const {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : values_) {
        if (defaults_.at(k) != v) out[k] = v;
    }
    return out;
}

}  // namespace ett
