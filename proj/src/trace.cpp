#include "fedcast/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "fedcast/format.hpp"
#include "fedcast/keyvalue.hpp"

namespace fedcast {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const std::vector<std::string> kCanonicalColumns = {
    "timestamp", "latitude", "longitude", "speed",
    "rsrp",      "sinr",     "throughput", "radio_type"};

bool is_mandatory(const std::string& field) {
  return field == "timestamp" || field == "throughput";
}

bool same_number(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

std::vector<std::string> split_row(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    cells.push_back(trim(std::string_view(line).substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return cells;
}

std::string number_cell(double v) { return std::isnan(v) ? "" : format_number(v); }

}  // namespace

RadioType parse_radio_type(const std::string& text) {
  std::string t;
  for (char c : text) {
    if (c != '-' && c != '_' && c != ' ') t.push_back(static_cast<char>(std::toupper(c)));
  }
  if (t == "LTE" || t == "4G") return RadioType::kLte;
  if (t == "NRNSA" || t == "5GNSA" || t == "NSA") return RadioType::kNrNsa;
  if (t == "NRSA" || t == "5GSA" || t == "SA") return RadioType::kNrSa;
  return RadioType::kUnknown;
}

std::string to_string(RadioType r) {
  switch (r) {
    case RadioType::kLte: return "LTE";
    case RadioType::kNrNsa: return "NR-NSA";
    case RadioType::kNrSa: return "NR-SA";
    case RadioType::kUnknown: break;
  }
  return "UNKNOWN";
}

std::vector<double> ClientTrace::throughput() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.throughput);
  return out;
}

double field_value(const TraceRecord& r, const std::string& name) {
  if (name == "timestamp") return r.timestamp;
  if (name == "latitude") return r.latitude;
  if (name == "longitude") return r.longitude;
  if (name == "speed") return r.speed;
  if (name == "rsrp") return r.rsrp;
  if (name == "sinr") return r.sinr;
  if (name == "throughput") return r.throughput;
  const auto it = r.extras.find(name);
  if (it == r.extras.end()) throw TraceError("unknown trace field '" + name + "'");
  return it->second;
}

void set_field_value(TraceRecord& r, const std::string& name, double v) {
  if (name == "timestamp") r.timestamp = v;
  else if (name == "latitude") r.latitude = v;
  else if (name == "longitude") r.longitude = v;
  else if (name == "speed") r.speed = v;
  else if (name == "rsrp") r.rsrp = v;
  else if (name == "sinr") r.sinr = v;
  else if (name == "throughput") r.throughput = v;
  else r.extras[name] = v;
}

bool same_trace(const ClientTrace& a, const ClientTrace& b) {
  if (a.client_id != b.client_id || a.dataset_tag != b.dataset_tag ||
      a.sample_period != b.sample_period || a.records.size() != b.records.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& x = a.records[i];
    const auto& y = b.records[i];
    for (const auto& f : continuous_fields()) {
      if (!same_number(field_value(x, f), field_value(y, f))) return false;
    }
    if (!same_number(x.timestamp, y.timestamp) || x.radio_type != y.radio_type ||
        x.extras.size() != y.extras.size()) {
      return false;
    }
    for (const auto& [k, v] : x.extras) {
      const auto it = y.extras.find(k);
      if (it == y.extras.end() || !same_number(v, it->second)) return false;
    }
  }
  return true;
}

// ---- ColumnMapping --------------------------------------------------------

ColumnMapping ColumnMapping::canonical() {
  ColumnMapping m;
  for (const auto& c : kCanonicalColumns) m.columns[c] = c;
  m.unmapped_as_extras = true;
  return m;
}

ColumnMapping ColumnMapping::load(const std::filesystem::path& path) {
  const auto doc = KeyValueDoc::load(path);
  ColumnMapping m;
  for (const auto& [field, column] : doc.section("columns")) m.columns[field] = column;
  for (const auto& [field, factor] : doc.section("units")) {
    const auto v = parse_number(factor);
    if (!v) throw TraceError("unit factor for '" + field + "' is not numeric");
    m.unit_factors[field] = *v;
  }
  if (const auto s = doc.get("missing", "sentinels")) {
    m.missing_sentinels = split_list(*s);
    m.missing_sentinels.push_back("");
  }
  if (const auto v = doc.get("options", "unmapped_as_extras")) {
    m.unmapped_as_extras = (*v == "true" || *v == "1");
  }
  m.client_id = doc.get("options", "client_id").value_or("");
  m.dataset_tag = doc.get("options", "dataset_tag").value_or("");
  m.validate();
  return m;
}

void ColumnMapping::validate() const {
  for (const char* f : {"timestamp", "throughput"}) {
    if (!columns.contains(f)) {
      throw TraceError(std::string("mapping does not map mandatory field '") + f + "'");
    }
  }
  std::set<std::string> sources;
  for (const auto& [field, column] : columns) {
    if (std::find(kCanonicalColumns.begin(), kCanonicalColumns.end(), field) ==
        kCanonicalColumns.end()) {
      throw TraceError("mapping names unknown canonical field '" + field + "'");
    }
    if (!sources.insert(column).second) {
      throw TraceError("source column '" + column + "' is mapped twice");
    }
  }
}

// ---- loading ----------------------------------------------------------------

LoadResult parse_trace(std::istream& in, const ColumnMapping& mapping) {
  mapping.validate();
  std::string header;
  while (std::getline(in, header) && trim(header).empty()) {
  }
  if (trim(header).empty()) throw TraceError("empty file");
  const char delim = header.find('\t') != std::string::npos ? '\t' : ',';
  const auto names = split_row(header, delim);

  auto column_of = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names.begin());
  };

  std::map<std::string, std::size_t> canonical_at;
  std::set<std::size_t> claimed;
  for (const auto& [field, column] : mapping.columns) {
    const auto idx = column_of(column);
    if (!idx) {
      if (is_mandatory(field)) {
        throw TraceError("missing mandatory column '" + column + "' for field '" +
                         field + "'");
      }
      continue;
    }
    canonical_at[field] = *idx;
    claimed.insert(*idx);
  }
  std::map<std::string, std::size_t> extras_at;
  if (mapping.unmapped_as_extras) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (!claimed.contains(i) && !names[i].empty()) extras_at[names[i]] = i;
    }
  }

  auto is_missing = [&](const std::string& cell) {
    return std::find(mapping.missing_sentinels.begin(), mapping.missing_sentinels.end(),
                     cell) != mapping.missing_sentinels.end();
  };
  auto factor = [&](const std::string& field) {
    const auto it = mapping.unit_factors.find(field);
    return it == mapping.unit_factors.end() ? 1.0 : it->second;
  };

  LoadResult result;
  result.trace.client_id = mapping.client_id;
  result.trace.dataset_tag = mapping.dataset_tag;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_row(line, delim);
    if (cells.size() != names.size()) {
      throw TraceError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(names.size()) + " fields, found " +
                       std::to_string(cells.size()));
    }
    TraceRecord rec;
    rec.latitude = rec.longitude = rec.speed = rec.rsrp = rec.sinr = kNaN;
    bool drop = false;
    for (const auto& [field, idx] : canonical_at) {
      const std::string& cell = cells[idx];
      if (field == "radio_type") {
        rec.radio_type = parse_radio_type(cell);
        continue;
      }
      if (is_missing(cell)) {
        if (is_mandatory(field)) drop = true;
        set_field_value(rec, field, kNaN);
        continue;
      }
      const auto v = parse_number(cell);
      if (!v) {
        throw TraceError("line " + std::to_string(line_no) + ": non-numeric value '" +
                         cell + "' in column '" + names[idx] + "'");
      }
      set_field_value(rec, field, *v * factor(field));
    }
    for (const auto& [name, idx] : extras_at) {
      const std::string& cell = cells[idx];
      if (is_missing(cell)) {
        rec.extras[name] = kNaN;
        continue;
      }
      const auto v = parse_number(cell);
      if (!v) {
        throw TraceError("line " + std::to_string(line_no) + ": non-numeric value '" +
                         cell + "' in column '" + name + "'");
      }
      rec.extras[name] = *v;
    }
    if (drop || !std::isfinite(rec.timestamp) || !std::isfinite(rec.throughput) ||
        rec.throughput < 0.0) {
      ++result.dropped_rows;
      continue;
    }
    result.trace.records.push_back(std::move(rec));
  }
  auto& recs = result.trace.records;
  if (recs.empty()) throw TraceError("no usable rows");

  std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
    return a.timestamp < b.timestamp;
  });
  const double t0 = recs.front().timestamp;
  for (auto& r : recs) r.timestamp -= t0;

  std::vector<double> steps;
  for (std::size_t i = 1; i < recs.size(); ++i) {
    const double d = recs[i].timestamp - recs[i - 1].timestamp;
    if (d > 0.0) steps.push_back(d);
  }
  if (!steps.empty()) {
    std::nth_element(steps.begin(), steps.begin() + steps.size() / 2, steps.end());
    result.trace.sample_period = steps[steps.size() / 2];
  }
  return result;
}

LoadResult load_trace(const std::filesystem::path& path, const ColumnMapping& mapping) {
  std::ifstream in(path);
  if (!in) throw TraceError("cannot open " + path.string());
  auto result = parse_trace(in, mapping);
  if (result.trace.client_id.empty()) result.trace.client_id = path.stem().string();
  return result;
}

void export_trace(std::ostream& out, const ClientTrace& trace) {
  std::set<std::string> extra_names;
  for (const auto& r : trace.records) {
    for (const auto& [k, v] : r.extras) extra_names.insert(k);
  }
  for (std::size_t i = 0; i < kCanonicalColumns.size(); ++i) {
    out << (i ? "," : "") << kCanonicalColumns[i];
  }
  for (const auto& e : extra_names) out << ',' << e;
  out << '\n';
  for (const auto& r : trace.records) {
    out << number_cell(r.timestamp) << ',' << number_cell(r.latitude) << ','
        << number_cell(r.longitude) << ',' << number_cell(r.speed) << ','
        << number_cell(r.rsrp) << ',' << number_cell(r.sinr) << ','
        << number_cell(r.throughput) << ',' << to_string(r.radio_type);
    for (const auto& e : extra_names) {
      const auto it = r.extras.find(e);
      out << ',' << (it == r.extras.end() ? "" : number_cell(it->second));
    }
    out << '\n';
  }
}

void export_trace(const std::filesystem::path& path, const ClientTrace& trace) {
  std::ofstream out(path);
  if (!out) throw TraceError("cannot write " + path.string());
  export_trace(out, trace);
}

// ---- cleaning ---------------------------------------------------------------

ClientTrace clean_and_resample(const ClientTrace& trace, double period,
                               std::size_t max_gap) {
  if (trace.records.empty()) throw TraceError("clean_and_resample: empty trace");
  if (!(period > 0.0)) throw TraceError("clean_and_resample: period must be positive");

  auto recs = trace.records;
  std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
    return a.timestamp < b.timestamp;
  });
  const double t0 = recs.front().timestamp;

  std::set<std::string> extra_names;
  for (const auto& r : recs) {
    for (const auto& [k, v] : r.extras) extra_names.insert(k);
  }
  std::vector<std::string> fields = continuous_fields();
  fields.insert(fields.end(), extra_names.begin(), extra_names.end());

  // Snap to the sampling grid and average rows that land on the same slot.
  struct Slot {
    long long index;
    TraceRecord record;
  };
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < recs.size();) {
    const long long idx = std::llround((recs[i].timestamp - t0) / period);
    std::size_t j = i;
    while (j < recs.size() && std::llround((recs[j].timestamp - t0) / period) == idx) ++j;
    TraceRecord merged = recs[i];
    const double n = static_cast<double>(j - i);
    for (const auto& f : fields) {
      double acc = 0.0;
      for (std::size_t k = i; k < j; ++k) {
        const auto it = recs[k].extras.find(f);
        const bool is_extra = std::find(continuous_fields().begin(),
                                        continuous_fields().end(),
                                        f) == continuous_fields().end();
        acc += is_extra ? (it == recs[k].extras.end() ? kNaN : it->second)
                        : field_value(recs[k], f);
      }
      set_field_value(merged, f, j - i == 1 ? acc : acc / n);
    }
    slots.push_back({idx, std::move(merged)});
    i = j;
  }

  // Split into runs at gaps wider than max_gap; interpolate the rest.
  std::vector<std::vector<Slot>> runs(1);
  runs.back().push_back(slots.front());
  for (std::size_t i = 1; i < slots.size(); ++i) {
    const Slot prev = runs.back().back();
    const long long missing = slots[i].index - prev.index - 1;
    if (missing > static_cast<long long>(max_gap)) {
      runs.emplace_back();
    } else {
      for (long long m = 1; m <= missing; ++m) {
        const double w = static_cast<double>(m) / static_cast<double>(missing + 1);
        TraceRecord r = prev.record;
        for (const auto& f : fields) {
          const double a = field_value(prev.record, f);
          const double b = field_value(slots[i].record, f);
          set_field_value(r, f, a + w * (b - a));
        }
        runs.back().push_back({prev.index + m, std::move(r)});
      }
    }
    runs.back().push_back(slots[i]);
  }
  const auto best = std::max_element(runs.begin(), runs.end(), [](const auto& a,
                                                                   const auto& b) {
    return a.size() < b.size();
  });
  if (best->size() < 2) {
    throw TraceError("trace shorter than 2 records after cleaning");
  }

  ClientTrace out;
  out.client_id = trace.client_id;
  out.dataset_tag = trace.dataset_tag;
  out.sample_period = period;
  const long long first = best->front().index;
  for (auto& s : *best) {
    s.record.timestamp = static_cast<double>(s.index - first) * period;
    out.records.push_back(std::move(s.record));
  }
  return out;
}

}  // namespace fedcast
