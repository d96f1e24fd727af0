#include "fedcast/keyvalue.hpp"

#include <fstream>
#include <stdexcept>

namespace fedcast {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

KeyValueDoc KeyValueDoc::parse(std::istream& in) {
  KeyValueDoc doc;
  std::string line;
  std::string section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto cut = line.find_first_of("#;");
    std::string body = trim(cut == std::string::npos ? line : line.substr(0, cut));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') {
        throw std::runtime_error("line " + std::to_string(number) +
                                 ": unterminated section header");
      }
      section = trim(std::string_view(body).substr(1, body.size() - 2));
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("line " + std::to_string(number) +
                               ": expected key = value");
    }
    doc.entries_.push_back(
        {section, trim(body.substr(0, eq)), trim(body.substr(eq + 1)), number});
  }
  return doc;
}

KeyValueDoc KeyValueDoc::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse(in);
}

std::optional<std::string> KeyValueDoc::get(const std::string& section,
                                            const std::string& key) const {
  std::optional<std::string> found;
  for (const auto& e : entries_) {
    if (e.section == section && e.key == key) found = e.value;
  }
  return found;
}

std::vector<std::pair<std::string, std::string>> KeyValueDoc::section(
    const std::string& name) const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : entries_) {
    if (e.section == name) out.emplace_back(e.key, e.value);
  }
  return out;
}

bool KeyValueDoc::has_section(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.section == name) return true;
  }
  return false;
}

}  // namespace fedcast
