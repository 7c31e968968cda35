#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kgmpc/common.hpp"
#include "kgmpc/io.hpp"

namespace kgmpc {

// Minimal structured-text config reader: named tables `[name]`, repeated
// tables `[[name]]`, `key = value` pairs with numbers, booleans, quoted
// strings and flat arrays, `#` comments. Covers the benchmark, campaign
// and scenario files without dragging in a full TOML implementation.

struct ConfigValue {
    enum class Kind { Number, Boolean, String, Array };
    Kind kind = Kind::Number;
    double number = 0.0;
    bool boolean = false;
    std::string text;
    std::vector<ConfigValue> array;
};

class ConfigTable {
  public:
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    double num(const std::string& key) const { return get(key, ConfigValue::Kind::Number).number; }
    double num_or(const std::string& key, double fallback) const { return has(key) ? num(key) : fallback; }
    int integer(const std::string& key) const {
        double v = num(key);
        auto i = static_cast<long long>(v);
        if (static_cast<double>(i) != v) throw ConfigError("expected integer for key '" + key + "'");
        return static_cast<int>(i);
    }
    int integer_or(const std::string& key, int fallback) const { return has(key) ? integer(key) : fallback; }
    bool boolean(const std::string& key) const { return get(key, ConfigValue::Kind::Boolean).boolean; }
    bool boolean_or(const std::string& key, bool fallback) const { return has(key) ? boolean(key) : fallback; }
    const std::string& str(const std::string& key) const { return get(key, ConfigValue::Kind::String).text; }
    std::string str_or(const std::string& key, const std::string& fallback) const {
        return has(key) ? str(key) : fallback;
    }
    std::vector<double> num_array(const std::string& key) const {
        const auto& v = get(key, ConfigValue::Kind::Array);
        std::vector<double> out;
        for (const auto& e : v.array) {
            if (e.kind != ConfigValue::Kind::Number) throw ConfigError("array '" + key + "' must be numeric");
            out.push_back(e.number);
        }
        return out;
    }

    void set(const std::string& key, ConfigValue v) { values_[key] = std::move(v); }
    const std::map<std::string, ConfigValue>& items() const { return values_; }

  private:
    const ConfigValue& get(const std::string& key, ConfigValue::Kind kind) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
        if (it->second.kind != kind) throw ConfigError("wrong type for config key '" + key + "'");
        return it->second;
    }

    std::map<std::string, ConfigValue> values_;
};

class ConfigFile {
  public:
    bool has_table(const std::string& name) const { return tables_.count(name) != 0; }
    const ConfigTable& table(const std::string& name) const {
        auto it = tables_.find(name);
        if (it == tables_.end()) throw ConfigError("missing config table [" + name + "]");
        return it->second;
    }
    ConfigTable table_or_empty(const std::string& name) const {
        return has_table(name) ? table(name) : ConfigTable{};
    }
    const std::vector<ConfigTable>& list(const std::string& name) const {
        static const std::vector<ConfigTable> empty;
        auto it = lists_.find(name);
        return it == lists_.end() ? empty : it->second;
    }

    ConfigTable& mutable_table(const std::string& name) { return tables_[name]; }
    std::vector<ConfigTable>& mutable_list(const std::string& name) { return lists_[name]; }

  private:
    std::map<std::string, ConfigTable> tables_;
    std::map<std::string, std::vector<ConfigTable>> lists_;
};

namespace detail {

inline std::string strip(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') in_str = !in_str;
        if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

inline ConfigValue parse_value(const std::string& raw, int lineno) {
    std::string s = strip(raw);
    if (s.empty()) throw ConfigError("empty value at line " + std::to_string(lineno));
    ConfigValue v;
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"')
            throw ConfigError("unterminated string at line " + std::to_string(lineno));
        v.kind = ConfigValue::Kind::String;
        v.text = s.substr(1, s.size() - 2);
        return v;
    }
    if (s == "true" || s == "false") {
        v.kind = ConfigValue::Kind::Boolean;
        v.boolean = (s == "true");
        return v;
    }
    if (s.front() == '[') {
        if (s.back() != ']') throw ConfigError("unterminated array at line " + std::to_string(lineno));
        v.kind = ConfigValue::Kind::Array;
        std::string inner = s.substr(1, s.size() - 2);
        std::size_t start = 0;
        while (start < inner.size()) {
            std::size_t comma = inner.find(',', start);
            std::string piece = inner.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            if (!strip(piece).empty()) v.array.push_back(parse_value(piece, lineno));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return v;
    }
    char* end = nullptr;
    v.number = std::strtod(s.c_str(), &end);
    if (end == nullptr || *end != '\0')
        throw ConfigError("cannot parse value '" + s + "' at line " + std::to_string(lineno));
    v.kind = ConfigValue::Kind::Number;
    return v;
}

}  // namespace detail

inline ConfigFile parse_config(const std::string& text) {
    ConfigFile file;
    ConfigTable* current = &file.mutable_table("");
    std::size_t pos = 0;
    int lineno = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
        pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
        ++lineno;
        line = detail::strip(detail::strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            bool repeated = line.size() > 1 && line[1] == '[';
            std::string closer = repeated ? "]]" : "]";
            if (line.substr(line.size() - closer.size()) != closer)
                throw ConfigError("malformed table header at line " + std::to_string(lineno));
            std::string name =
                detail::strip(line.substr(repeated ? 2 : 1, line.size() - 2 * (repeated ? 2 : 1)));
            if (name.empty()) throw ConfigError("empty table name at line " + std::to_string(lineno));
            if (repeated) {
                auto& vec = file.mutable_list(name);
                vec.emplace_back();
                current = &vec.back();
            } else {
                current = &file.mutable_table(name);
            }
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected 'key = value' at line " + std::to_string(lineno));
        std::string key = detail::strip(line.substr(0, eq));
        if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
        current->set(key, detail::parse_value(line.substr(eq + 1), lineno));
    }
    return file;
}

inline ConfigFile load_config(const std::filesystem::path& path) {
    try {
        return parse_config(read_file(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

}  // namespace kgmpc
