#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace wnet {

using KeyValues = std::map<std::string, std::string>;

/// Parses an INI-style file: `[section]` headers, `key = value` lines,
/// `#` or `;` comments. Keys are returned as "section.key" ("key" before
/// any header). Throws std::runtime_error naming the file and line on
/// malformed input.
KeyValues parse_key_values(const std::string& text, const std::string& origin = "<text>");
KeyValues read_key_value_file(const std::filesystem::path& path);

/// Renders `section.key` entries back into sectioned text, sorted.
std::string format_key_values(const KeyValues& kv);

// Typed lookups. Missing keys return `fallback`; unparsable values throw
// std::runtime_error naming the key.
int kv_int(const KeyValues& kv, const std::string& key, int fallback);
std::uint64_t kv_u64(const KeyValues& kv, const std::string& key, std::uint64_t fallback);
double kv_double(const KeyValues& kv, const std::string& key, double fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);

/// Typed lookups for keys that must be present.
int kv_require_int(const KeyValues& kv, const std::string& key);
double kv_require_double(const KeyValues& kv, const std::string& key);

}  // namespace wnet
