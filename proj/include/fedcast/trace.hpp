#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedcast {

enum class RadioType { kUnknown, kLte, kNrNsa, kNrSa };

RadioType parse_radio_type(const std::string& text);
std::string to_string(RadioType r);

/// One timestamped row. Optional numeric fields hold NaN when absent.
struct TraceRecord {
  double timestamp = 0.0;  // seconds since trace start
  double latitude = 0.0;
  double longitude = 0.0;
  double speed = 0.0;       // m/s
  double rsrp = 0.0;        // dBm
  double sinr = 0.0;        // dB
  double throughput = 0.0;  // Mbps
  RadioType radio_type = RadioType::kUnknown;
  std::map<std::string, double> extras;
};

struct ClientTrace {
  std::string client_id;
  std::string dataset_tag;
  std::vector<TraceRecord> records;
  double sample_period = 1.0;

  std::size_t size() const { return records.size(); }
  std::vector<double> throughput() const;
};

/// Continuous fields a model may consume, by canonical name.
inline const std::vector<std::string>& continuous_fields() {
  static const std::vector<std::string> kFields = {
      "latitude", "longitude", "speed", "rsrp", "sinr", "throughput"};
  return kFields;
}

/// Reads a canonical or extra field by name; throws for unknown names.
double field_value(const TraceRecord& r, const std::string& name);
void set_field_value(TraceRecord& r, const std::string& name, double v);

/// NaN-aware structural equality (NaN == NaN).
bool same_trace(const ClientTrace& a, const ClientTrace& b);

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// How a source table maps onto the canonical schema.
struct ColumnMapping {
  /// canonical field -> source column. "timestamp" and "throughput" are
  /// mandatory; the rest of the canonical fields are optional.
  std::map<std::string, std::string> columns;
  /// canonical field -> multiplier applied after parsing (e.g. kbps -> Mbps).
  std::map<std::string, double> unit_factors;
  std::vector<std::string> missing_sentinels = {"", "-", "NA", "NaN", "nan"};
  /// Source columns not mapped to a canonical field become extras.
  bool unmapped_as_extras = false;
  std::string client_id;
  std::string dataset_tag;

  /// Maps every canonical field to a column of the same name.
  static ColumnMapping canonical();
  /// Parses a key-value mapping document with sections [columns], [units],
  /// [missing] (key `sentinels`, comma list) and [options].
  static ColumnMapping load(const std::filesystem::path& path);

  /// Throws TraceError when a mandatory field is unmapped or a column is
  /// claimed twice.
  void validate() const;
};

struct LoadResult {
  ClientTrace trace;
  std::size_t dropped_rows = 0;
};

LoadResult load_trace(const std::filesystem::path& path,
                      const ColumnMapping& mapping);
LoadResult parse_trace(std::istream& in, const ColumnMapping& mapping);

/// Writes the canonical column order, then any extras in name order.
void export_trace(std::ostream& out, const ClientTrace& trace);
void export_trace(const std::filesystem::path& path, const ClientTrace& trace);

/// Collapses duplicate grid times by mean, interpolates gaps of at most
/// `max_gap` missing samples and keeps the longest contiguous run otherwise.
ClientTrace clean_and_resample(const ClientTrace& trace, double period = 1.0,
                               std::size_t max_gap = 3);

}  // namespace fedcast
