#include "fedcast/params.hpp"

#include <istream>
#include <ostream>

#include "fedcast/format.hpp"
#include "fedcast/keyvalue.hpp"

namespace fedcast {

void ParamSet::add(std::string name, Tensor value, bool is_batchnorm, bool trainable) {
  if (index_.contains(name)) throw StructureError("duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), std::move(value), is_batchnorm, trainable});
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool ParamSet::contains(const std::string& name) const { return index_.contains(name); }

ParamEntry& ParamSet::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw StructureError("no parameter named '" + name + "'");
  return entries_[it->second];
}

const ParamEntry& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

bool ParamSet::same_structure(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.value.shape() != b.value.shape() ||
        a.is_batchnorm != b.is_batchnorm || a.trainable != b.trainable) {
      return false;
    }
  }
  return true;
}

void write_params(std::ostream& out, const ParamSet& params,
                  const std::map<std::string, std::string>& header) {
  out << "format=fedcast-params-v1\n";
  for (const auto& [k, v] : header) out << "meta." << k << '=' << v << '\n';
  for (const auto& e : params.entries()) {
    out << "param." << e.name << "=bn:" << (e.is_batchnorm ? 1 : 0)
        << ";trainable:" << (e.trainable ? 1 : 0) << ";shape:";
    const auto& s = e.value.shape();
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "x" : "") << s[i];
    out << ";values:";
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      out << (i ? "," : "") << format_number(e.value[i]);
    }
    out << '\n';
  }
}

ParamSet read_params(std::istream& in, std::map<std::string, std::string>* header) {
  ParamSet params;
  std::string line;
  bool seen_format = false;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw StructureError("malformed parameter line");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "format") {
      if (value != "fedcast-params-v1") throw StructureError("unknown format " + value);
      seen_format = true;
    } else if (key.starts_with("meta.")) {
      if (header != nullptr) (*header)[key.substr(5)] = value;
    } else if (key.starts_with("param.")) {
      std::map<std::string, std::string> fields;
      for (const auto& part : split_list(value, ';')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw StructureError("malformed field " + part);
        fields[part.substr(0, colon)] = part.substr(colon + 1);
      }
      Shape shape;
      for (const auto& d : split_list(fields["shape"], 'x')) {
        const auto v = parse_number(d);
        if (!v) throw StructureError("bad shape in " + key);
        shape.push_back(static_cast<std::size_t>(*v));
      }
      std::vector<double> values;
      for (const auto& tok : split_list(fields["values"], ',')) {
        const auto v = parse_number(tok);
        if (!v) throw StructureError("bad value '" + tok + "' in " + key);
        values.push_back(*v);
      }
      params.add(key.substr(6), Tensor(std::move(shape), std::move(values)),
                 fields["bn"] == "1", fields["trainable"] == "1");
    } else {
      throw StructureError("unexpected key " + key);
    }
  }
  if (!seen_format) throw StructureError("missing format line");
  return params;
}

}  // namespace fedcast
