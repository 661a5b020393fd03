// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: flat `key = value` lines grouped by [section].
// '#' and ';' start comments. Unknown sections or keys, duplicate keys and
// malformed values are errors carrying the offending line number.
//
//   [data]      seed, cleanup, batch
//   [pretrain]  epochs, lr, lr_decay, lr_decay_every, levels, base_channels
//   [adapt]     K, tau, lambda, dropout, lr, epochs

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "upl/adaptation.hpp"

namespace upl {

class ConfigError : public std::runtime_error {
   public:
    ConfigError(const std::string& source, int line, const std::string& msg)
        : std::runtime_error(source + (line > 0 ? ":" + std::to_string(line) : std::string()) + ": " + msg),
          line_(line) {}
    int line() const { return line_; }

   private:
    int line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("'" + v + "' is not a valid number");
    return out;
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("'" + v + "' is not a boolean");
}

}  // namespace detail

/// Applies the text of a config file on top of `base`, then validates the
/// result for `classes` classes.
inline AdaptConfig parse_config(const std::string& text, const std::string& source = "<config>",
                                AdaptConfig base = {}, int classes = 3) {
    using Setter = std::function<void(AdaptConfig&, const std::string&)>;
    auto i32 = [](int AdaptConfig::*f) {
        return Setter([f](AdaptConfig& c, const std::string& v) { c.*f = detail::parse_number<int>(v); });
    };
    auto f32 = [](float AdaptConfig::*f) {
        return Setter([f](AdaptConfig& c, const std::string& v) { c.*f = detail::parse_number<float>(v); });
    };
    const std::map<std::string, std::map<std::string, Setter>> keys = {
        {"data",
         {{"seed", [](AdaptConfig& c, const std::string& v) { c.seed = detail::parse_number<std::uint64_t>(v); }},
          {"cleanup", [](AdaptConfig& c, const std::string& v) { c.cleanup = detail::parse_bool(v); }},
          {"batch",
           [](AdaptConfig& c, const std::string& v) {
               c.batch_size = v == "volume" ? 0 : detail::parse_number<int>(v);
           }}}},
        {"pretrain",
         {{"epochs", i32(&AdaptConfig::pretrain_epochs)},
          {"lr", f32(&AdaptConfig::lr_pretrain)},
          {"lr_decay", f32(&AdaptConfig::lr_decay)},
          {"lr_decay_every", i32(&AdaptConfig::lr_decay_every)},
          {"levels", [](AdaptConfig& c, const std::string& v) { c.arch.levels = detail::parse_number<int>(v); }},
          {"base_channels",
           [](AdaptConfig& c, const std::string& v) { c.arch.base_channels = detail::parse_number<int>(v); }}}},
        {"adapt",
         {{"K", i32(&AdaptConfig::K)},
          {"tau", f32(&AdaptConfig::tau)},
          {"lambda", f32(&AdaptConfig::lambda)},
          {"dropout",
           [](AdaptConfig& c, const std::string& v) { c.arch.dropout_rate = detail::parse_number<float>(v); }},
          {"lr", f32(&AdaptConfig::lr_adapt)},
          {"epochs", i32(&AdaptConfig::adapt_epochs)}}},
    };

    AdaptConfig cfg = base;
    std::istringstream in(text);
    std::string raw, section;
    std::set<std::string> seen;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find_first_of("#;");
        const std::string s = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError(source, line, "malformed section header '" + s + "'");
            section = detail::trim(s.substr(1, s.size() - 2));
            if (!keys.count(section)) throw ConfigError(source, line, "unknown section [" + section + "]");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(source, line, "expected 'key = value', got '" + s + "'");
        const std::string key = detail::trim(s.substr(0, eq));
        const std::string value = detail::trim(s.substr(eq + 1));
        if (section.empty()) throw ConfigError(source, line, "key '" + key + "' appears before any [section]");
        const auto& sec = keys.at(section);
        const auto it = sec.find(key);
        if (it == sec.end()) throw ConfigError(source, line, "unknown key '" + key + "' in [" + section + "]");
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(source, line, "duplicate key '" + key + "' in [" + section + "]");
        }
        if (value.empty()) throw ConfigError(source, line, "missing value for '" + key + "'");
        try {
            it->second(cfg, value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(source, line, key + ": " + e.what());
        }
    }
    try {
        cfg.validate(classes);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(source, 0, e.what());
    }
    return cfg;
}

inline AdaptConfig load_config(const std::string& path, AdaptConfig base = {}, int classes = 3) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path, 0, "cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path, base, classes);
}

}  // namespace upl
