// SPDX-License-Identifier: Apache-2.0
#pragma once

// Canonical key=value text used by config files, scenarios and checkpoints.

#include <charconv>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "samt/errors.hpp"
#include "samt/tokenizer.hpp"

namespace samt {

class KeyValues {
public:
    KeyValues() = default;

    static KeyValues parse(std::string_view text) {
        KeyValues kv;
        std::size_t pos = 0, line_no = 0;
        while (pos <= text.size()) {
            std::size_t nl = text.find('\n', pos);
            if (nl == std::string_view::npos) nl = text.size();
            std::string_view line = text.substr(pos, nl - pos);
            pos = nl + 1;
            ++line_no;
            line = trim(line);
            if (line.empty() || line.front() == '#') continue;
            const auto eq = line.find('=');
            require_input(eq != std::string_view::npos, "line " + std::to_string(line_no) + ": expected key=value");
            const std::string key(trim(line.substr(0, eq)));
            require_input(!key.empty(), "line " + std::to_string(line_no) + ": empty key");
            require_input(!kv.values_.count(key), "duplicate key '" + key + "'");
            kv.values_[key] = std::string(trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static KeyValues load(const std::string& path) { return parse(detail::read_file(path)); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    std::string get(const std::string& key, const std::string& fallback) const {
        used_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        return detail::parse_number<double>(get(key, ""), "for key " + key);
    }

    std::size_t get_size(const std::string& key, std::size_t fallback) const {
        if (!has(key)) return fallback;
        return detail::parse_number<std::size_t>(get(key, ""), "for key " + key);
    }

    std::vector<std::size_t> get_sizes(const std::string& key, std::vector<std::size_t> fallback) const {
        if (!has(key)) return fallback;
        std::vector<std::size_t> out;
        const std::string value = get(key, "");
        for (auto part : split(value, ',')) out.push_back(detail::parse_number<std::size_t>(trim(part), "in list " + key));
        return out;
    }

    std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> fallback) const {
        if (!has(key)) return fallback;
        std::vector<std::string> out;
        const std::string value = get(key, "");
        for (auto part : split(value, ',')) out.emplace_back(trim(part));
        return out;
    }

    /// Keys present in the file that no getter asked for.
    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) out.push_back(k);
        return out;
    }

    void reject_unused(const std::string& what) const {
        const auto unused = unused_keys();
        require_input(unused.empty(), "unknown " + what + " key '" + (unused.empty() ? "" : unused.front()) + "'");
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    static std::string_view trim(std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
        return s;
    }

    static std::vector<std::string_view> split(std::string_view s, char sep) {
        std::vector<std::string_view> out;
        if (s.empty()) return out;
        std::size_t pos = 0;
        while (true) {
            const auto next = s.find(sep, pos);
            out.push_back(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
            if (next == std::string_view::npos) break;
            pos = next + 1;
        }
        return out;
    }

private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
};

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

} // namespace samt
