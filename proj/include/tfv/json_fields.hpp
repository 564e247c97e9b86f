#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <type_traits>

#include "json.hpp"

#include "tfv/error.hpp"

namespace tfv {

// Strict reader for one JSON object: typed fields, field-path errors, and
// rejection of keys nobody asked for.
class JsonFields {
public:
    JsonFields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    std::string field(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    // Leaves `out` untouched when the key is absent.
    template <class T>
    bool read(const std::string& key, T& out) {
        if (!j_.contains(key)) return false;
        seen_.insert(key);
        out = convert<T>(j_.at(key), field(key));
        return true;
    }

    template <class T>
    void require(const std::string& key, T& out) {
        if (!read(key, out)) throw ConfigError(field(key) + ": required field missing");
    }

    // Enum-like string field parsed by `parse`; parse errors gain the path.
    template <class T, class Parse>
    bool read_enum(const std::string& key, T& out, Parse parse) {
        std::string s;
        if (!read(key, s)) return false;
        try {
            out = parse(s);
        } catch (const std::exception& e) {
            throw ConfigError(field(key) + ": " + e.what());
        }
        return true;
    }

    const nlohmann::json* child(const std::string& key) {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown field");
    }

    template <class T>
    static T convert(const nlohmann::json& v, const std::string& where) {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(where + ": expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(where + ": expected a number");
            return v.get<T>();
        } else if constexpr (std::is_unsigned_v<T>) {
            if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                           v.get<std::int64_t>() < 0)) {
                throw ConfigError(where + ": expected a non-negative integer");
            }
            return v.get<T>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
            return v.get<T>();
        } else {
            try {
                return v.get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError(where + ": malformed value");
            }
        }
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace tfv
