#pragma once

// Flat key=value configuration: declared keys with defaults, a file loader,
// command-line overrides, and a resolved-snapshot writer. Keys must be
// declared before anything can set them, which is what rejects typos in
// config files and on the command line.

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tante/tensor.hpp"

namespace tante {

class KvConfig {
public:
    void declare(const std::string& key, const std::string& default_value) {
        check(values_.find(key) == values_.end(), "config: duplicate declaration of " + key);
        order_.push_back(key);
        values_[key] = default_value;
    }

    bool declared(const std::string& key) const { return values_.find(key) != values_.end(); }

    void set(const std::string& key, const std::string& value) {
        auto it = values_.find(key);
        check(it != values_.end(), "config: unknown key " + key);
        it->second = value;
    }

    // Lines are "key = value"; '#' starts a comment; blanks are skipped.
    void load_file(const std::string& path) {
        std::ifstream in(path);
        check(in.good(), "config: cannot open " + path);
        std::string line;
        std::int64_t lineno = 0;
        while (std::getline(in, line)) {
            lineno++;
            const std::string stripped = strip(line.substr(0, line.find('#')));
            if (stripped.empty()) continue;
            const auto eq = stripped.find('=');
            check(eq != std::string::npos, "config: " + path + ":" +
                                               std::to_string(lineno) + " is not key=value");
            set(strip(stripped.substr(0, eq)), strip(stripped.substr(eq + 1)));
        }
    }

    // One "key=value" as given on the command line.
    void apply_override(const std::string& kv) {
        const auto eq = kv.find('=');
        check(eq != std::string::npos, "config: override '" + kv + "' is not key=value");
        set(strip(kv.substr(0, eq)), strip(kv.substr(eq + 1)));
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        check(it != values_.end(), "config: unknown key " + key);
        return it->second;
    }

    std::int64_t get_int(const std::string& key) const {
        const std::string& v = get(key);
        std::size_t used = 0;
        std::int64_t out = 0;
        try {
            out = std::stoll(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        check(used == v.size() && !v.empty(), "config: " + key + "='" + v + "' is not an integer");
        return out;
    }

    std::uint64_t get_u64(const std::string& key) const {
        const std::string& v = get(key);
        std::size_t used = 0;
        std::uint64_t out = 0;
        try {
            out = std::stoull(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        check(used == v.size() && !v.empty(),
              "config: " + key + "='" + v + "' is not an unsigned integer");
        return out;
    }

    double get_double(const std::string& key) const {
        const std::string& v = get(key);
        std::size_t used = 0;
        double out = 0.0;
        try {
            out = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        check(used == v.size() && !v.empty(), "config: " + key + "='" + v + "' is not a number");
        return out;
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::runtime_error("config: " + key + "='" + v + "' is not a boolean");
    }

    // Comma-separated doubles, e.g. "0.002,0.05".
    std::vector<double> get_doubles(const std::string& key) const {
        const std::string& v = get(key);
        std::vector<double> out;
        std::size_t start = 0;
        while (start <= v.size()) {
            std::size_t comma = v.find(',', start);
            if (comma == std::string::npos) comma = v.size();
            const std::string item = strip(v.substr(start, comma - start));
            check(!item.empty(), "config: " + key + " has an empty element");
            std::size_t used = 0;
            double d = 0.0;
            try {
                d = std::stod(item, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            check(used == item.size(), "config: " + key + " element '" + item +
                                           "' is not a number");
            out.push_back(d);
            start = comma + 1;
        }
        return out;
    }

    // All declared keys with their effective values, in declaration order.
    // The output is itself loadable, so a snapshot reproduces the run.
    void write_snapshot(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        check(out.good(), "config: cannot open " + path);
        for (const std::string& key : order_) {
            out << key << " = " << values_.at(key) << '\n';
        }
        check(out.good(), "config: snapshot write failed for " + path);
    }

private:
    static std::string strip(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::vector<std::string> order_;
    std::map<std::string, std::string> values_;
};

}  // namespace tante
