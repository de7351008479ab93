#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "e2e/tensor.hpp"

namespace e2e::cfg {

/// key=value configuration with # comments. Later assignments override
/// earlier ones, so a file can be layered with command-line overrides.
class Config {
public:
    Config() = default;

    static Config from_string(const std::string& text, const std::string& origin = "<string>") {
        Config c;
        std::istringstream in(text);
        c.parse(in, origin);
        return c;
    }

    static Config from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("config: cannot open " + path);
        Config c;
        c.parse(in, path);
        return c;
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw Error("config: empty key");
        kv_[key] = value;
    }

    /// Applies every entry of `other` on top of this config.
    void merge(const Config& other) {
        for (const auto& [k, v] : other.kv_) kv_[k] = v;
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }
    std::string require_str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw Error("config: missing required key '" + key + "'");
        return it->second;
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        return parse_int(key, it->second);
    }
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t used = 0;
            const std::uint64_t v = std::stoull(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw Error("config: key '" + key + "' is not an unsigned integer: '" + it->second +
                        "'");
        }
    }
    double get_double(const std::string& key, double fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw Error("config: key '" + key + "' is not a number: '" + it->second + "'");
        }
    }
    bool get_bool(const std::string& key, bool fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw Error("config: key '" + key + "' is not a boolean: '" + v + "'");
    }

    /// All entries in key order (the storage is an ordered map).
    const std::map<std::string, std::string>& entries() const { return kv_; }

    /// Serialization that from_string parses back verbatim.
    std::string to_string() const {
        std::string out;
        for (const auto& [k, v] : kv_) {
            out += k;
            out += '=';
            out += v;
            out += '\n';
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw Error("config: cannot open " + path);
        f << to_string();
        if (!f) throw Error("config: short write to " + path);
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        std::size_t e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static int parse_int(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const int r = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing");
            return r;
        } catch (const std::exception&) {
            throw Error("config: key '" + key + "' is not an integer: '" + v + "'");
        }
    }

    void parse(std::istream& in, const std::string& origin) {
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string stripped = trim(line);
            if (stripped.empty()) continue;
            const std::size_t eq = stripped.find('=');
            if (eq == std::string::npos)
                throw Error("config: " + origin + ":" + std::to_string(lineno) +
                            ": expected key=value, got '" + stripped + "'");
            const std::string key = trim(stripped.substr(0, eq));
            const std::string value = trim(stripped.substr(eq + 1));
            if (key.empty())
                throw Error("config: " + origin + ":" + std::to_string(lineno) + ": empty key");
            kv_[key] = value;
        }
    }

    std::map<std::string, std::string> kv_;
};

}  // namespace e2e::cfg
