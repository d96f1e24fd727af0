#pragma once

#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fedcast {

/// Sectioned `key = value` text (INI-shaped). `#` and `;` start comments.
/// Keys outside any section belong to the section "".
class KeyValueDoc {
 public:
  struct Entry {
    std::string section;
    std::string key;
    std::string value;
    int line = 0;
  };

  static KeyValueDoc parse(std::istream& in);
  static KeyValueDoc load(const std::filesystem::path& path);

  std::optional<std::string> get(const std::string& section,
                                 const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> section(
      const std::string& name) const;
  bool has_section(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

std::string trim(std::string_view s);
/// Splits on `sep` and trims each piece; empty input gives an empty list.
std::vector<std::string> split_list(std::string_view s, char sep = ',');

}  // namespace fedcast
