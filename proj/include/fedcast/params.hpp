#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedcast/tensor.hpp"

namespace fedcast {

struct ParamEntry {
  std::string name;
  Tensor value;
  bool is_batchnorm = false;
  /// False for batch-norm running statistics.
  bool trainable = true;

  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

/// Ordered, uniquely named model parameters: the unit exchanged in a
/// federation round.
class ParamSet {
 public:
  void add(std::string name, Tensor value, bool is_batchnorm, bool trainable = true);

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  bool contains(const std::string& name) const;
  ParamEntry& at(const std::string& name);
  const ParamEntry& at(const std::string& name) const;

  /// Same names, order, shapes and flags.
  bool same_structure(const ParamSet& other) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

class StructureError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Plain-text `key=value` lines, one parameter per line, values written with
/// the shortest round-trip representation. Byte-stable across runs.
/// `header` lines (already `key=value`) are written first and returned on read.
void write_params(std::ostream& out, const ParamSet& params,
                  const std::map<std::string, std::string>& header = {});
ParamSet read_params(std::istream& in, std::map<std::string, std::string>* header = nullptr);

}  // namespace fedcast
