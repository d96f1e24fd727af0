#include "fedcast/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "fedcast/format.hpp"

namespace fedcast {
namespace {

std::vector<std::string> scaler_fields(const PreprocessConfig& cfg) {
  std::vector<std::string> fields;
  for (const auto& f : cfg.features) {
    if (std::find(fields.begin(), fields.end(), f) == fields.end()) fields.push_back(f);
  }
  if (std::find(fields.begin(), fields.end(), "throughput") == fields.end()) {
    fields.push_back("throughput");
  }
  return fields;
}

bool has_field(const TraceRecord& r, const std::string& f) {
  const auto& cf = continuous_fields();
  return std::find(cf.begin(), cf.end(), f) != cf.end() || r.extras.contains(f);
}

ClientTrace head(const ClientTrace& trace, std::size_t rows) {
  ClientTrace out = trace;
  out.records.resize(std::min(rows, trace.records.size()));
  return out;
}

}  // namespace

// ---- filtering --------------------------------------------------------------

std::vector<double> moving_average(std::span<const double> series, std::size_t window) {
  if (window == 0) throw PreprocessError("moving_average: window must be >= 1");
  if (series.empty()) throw PreprocessError("moving_average: empty series");
  std::vector<double> out(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double acc = 0.0;
    for (std::size_t j = lo; j <= i; ++j) acc += series[j];
    out[i] = acc / static_cast<double>(i - lo + 1);
  }
  return out;
}

ClientTrace filter_trace(const ClientTrace& trace, std::size_t window) {
  if (trace.records.empty()) throw PreprocessError("filter_trace: empty trace");
  ClientTrace out = trace;
  std::vector<std::string> fields = continuous_fields();
  for (const auto& [k, v] : trace.records.front().extras) fields.push_back(k);
  std::vector<double> column(trace.size());
  for (const auto& f : fields) {
    for (std::size_t i = 0; i < trace.size(); ++i) column[i] = field_value(trace.records[i], f);
    const auto smoothed = moving_average(column, window);
    for (std::size_t i = 0; i < trace.size(); ++i) set_field_value(out.records[i], f, smoothed[i]);
  }
  return out;
}

// ---- scaling ----------------------------------------------------------------

const ScalerState::Column& ScalerState::column(const std::string& field) const {
  for (const auto& c : columns) {
    if (c.field == field) return c;
  }
  throw PreprocessError("scaler has no column '" + field + "'");
}

double ScalerState::transform(const std::string& field, double v) const {
  const auto& c = column(field);
  if (c.constant) return v;
  return kind == ScalerKind::kMinMax ? (v - c.a) / (c.b - c.a) : (v - c.a) / c.b;
}

double ScalerState::inverse(const std::string& field, double v) const {
  const auto& c = column(field);
  if (c.constant) return v;
  return kind == ScalerKind::kMinMax ? c.a + v * (c.b - c.a) : c.a + v * c.b;
}

ScalerState fit_scaler(std::span<const ClientTrace> traces, ScalerKind kind,
                       const std::vector<std::string>& fields) {
  ScalerState s;
  s.kind = kind;
  for (const auto& f : fields) {
    std::vector<double> values;
    for (const auto& t : traces) {
      for (const auto& r : t.records) {
        if (!has_field(r, f)) throw PreprocessError("trace lacks field '" + f + "'");
        values.push_back(field_value(r, f));
      }
    }
    if (values.empty()) throw PreprocessError("fit_scaler: no rows to fit");
    for (double v : values) {
      if (!std::isfinite(v)) {
        throw PreprocessError("fit_scaler: field '" + f + "' has non-finite values");
      }
    }
    ScalerState::Column col{f};
    if (kind == ScalerKind::kMinMax) {
      const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
      col.a = *lo;
      col.b = *hi;
      col.constant = !(col.b > col.a);
    } else {
      double mean = 0.0;
      for (double v : values) mean += v;
      mean /= static_cast<double>(values.size());
      double sq = 0.0;
      for (double v : values) sq += (v - mean) * (v - mean);
      col.a = mean;
      col.b = std::sqrt(sq / static_cast<double>(values.size()));
      col.constant = !(col.b > 0.0);
    }
    s.columns.push_back(col);
  }
  return s;
}

ScalerState fit_scaler(std::span<const ClientTrace> traces, const PreprocessConfig& cfg) {
  return fit_scaler(traces, cfg.scaler_kind, scaler_fields(cfg));
}

ClientTrace apply_scaler(const ClientTrace& trace, const ScalerState& scaler) {
  ClientTrace out = trace;
  for (auto& r : out.records) {
    for (const auto& c : scaler.columns) {
      if (!has_field(r, c.field)) {
        throw PreprocessError("scaler was fitted on field '" + c.field +
                              "' which this trace lacks");
      }
      set_field_value(r, c.field, scaler.transform(c.field, field_value(r, c.field)));
    }
  }
  return out;
}

// ---- windows ----------------------------------------------------------------

std::vector<WindowSample> build_windows(const ClientTrace& trace, const WindowConfig& wc,
                                        const std::vector<std::string>& features,
                                        std::size_t stride,
                                        std::optional<std::size_t> first_anchor) {
  const std::size_t h = wc.history, f = wc.horizon;
  if (h < 1 || f < 1) throw PreprocessError("window history and horizon must be >= 1");
  if (stride < 1) throw PreprocessError("window stride must be >= 1");
  const std::size_t n = trace.size();
  if (n < h + f + 1) {
    throw PreprocessError("trace of length " + std::to_string(n) +
                          " is too short for H=" + std::to_string(h) +
                          ", F=" + std::to_string(f));
  }
  const std::size_t start = first_anchor.value_or(h);
  if (start < h) throw PreprocessError("first anchor precedes the history window");
  std::vector<WindowSample> out;
  for (std::size_t anchor = start; anchor + f <= n - 1; anchor += stride) {
    WindowSample s;
    s.anchor = anchor;
    s.features = Tensor({features.size(), h + 1});
    for (std::size_t j = 0; j <= h; ++j) {
      const auto& rec = trace.records[anchor - h + j];
      for (std::size_t c = 0; c < features.size(); ++c) {
        s.features.at(c, j) = field_value(rec, features[c]);
      }
      s.thpt_history.push_back(rec.throughput);
    }
    for (std::size_t k = 1; k <= f; ++k) s.target.push_back(trace.records[anchor + k].throughput);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<WindowSample> build_windows(const ClientTrace& trace, const WindowConfig& wc,
                                        const std::vector<std::string>& features) {
  return build_windows(trace, wc, features, wc.train_stride);
}

TrainTestSplit split_train_test(std::vector<WindowSample> samples, double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw PreprocessError("split ratio must lie in (0, 1)");
  if (samples.size() < 2) throw PreprocessError("split needs at least 2 samples");
  const auto n_train = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(samples.size()) + 1e-9));
  if (n_train == 0 || n_train == samples.size()) {
    throw PreprocessError("split leaves an empty partition");
  }
  TrainTestSplit out;
  out.test.assign(std::make_move_iterator(samples.begin() + static_cast<long>(n_train)),
                  std::make_move_iterator(samples.end()));
  samples.resize(n_train);
  out.train = std::move(samples);
  return out;
}

void dump_windows(std::ostream& out, std::span<const WindowSample> samples) {
  out << "anchor,kind,row,values\n";
  for (const auto& s : samples) {
    auto row = [&](const char* kind, std::size_t idx, std::span<const double> v) {
      out << s.anchor << ',' << kind << ',' << idx << ',';
      for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_number(v[i]);
      out << '\n';
    };
    const std::size_t cols = s.features.rank() == 2 ? s.features.dim(1) : 0;
    for (std::size_t r = 0; cols > 0 && r < s.features.dim(0); ++r) {
      row("feature", r, s.features.data().subspan(r * cols, cols));
    }
    row("thpt_history", 0, s.thpt_history);
    row("target", 0, s.target);
  }
}

// ---- pipeline -------------------------------------------------------------

std::vector<PreparedClient> prepare_clients(std::span<const ClientTrace> traces,
                                            const PreprocessConfig& pcfg,
                                            const WindowConfig& wc, double train_ratio) {
  std::vector<PreparedClient> out(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    auto& pc = out[i];
    pc.filtered = filter_trace(traces[i], pcfg.filter_window);
    // Window layout depends only on length, so the split point is known
    // before scaling.
    auto all = build_windows(pc.filtered, wc, pcfg.features, wc.train_stride);
    auto split = split_train_test(std::move(all), train_ratio);
    pc.fit_rows = split.train.back().anchor + wc.horizon + 1;
  }

  std::vector<ScalerState> scalers(traces.size());
  if (pcfg.scaling_scope == ScalingScope::kPerClient) {
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const ClientTrace fit = head(out[i].filtered, out[i].fit_rows);
      scalers[i] = fit_scaler(std::span(&fit, 1), pcfg);
    }
  } else {
    std::map<std::string, std::vector<std::size_t>> by_tag;
    for (std::size_t i = 0; i < traces.size(); ++i) by_tag[traces[i].dataset_tag].push_back(i);
    for (const auto& [tag, members] : by_tag) {
      std::vector<ClientTrace> fit;
      for (std::size_t i : members) fit.push_back(head(out[i].filtered, out[i].fit_rows));
      const auto s = fit_scaler(fit, pcfg);
      for (std::size_t i : members) scalers[i] = s;
    }
  }

  for (std::size_t i = 0; i < traces.size(); ++i) {
    auto& pc = out[i];
    pc.scaler = scalers[i];
    pc.scaled = apply_scaler(pc.filtered, pc.scaler);
    auto split = split_train_test(
        build_windows(pc.scaled, wc, pcfg.features, wc.train_stride), train_ratio);
    pc.train = std::move(split.train);
    const std::size_t first_test = pc.train.back().anchor + wc.horizon;
    if (first_test + wc.horizon > pc.scaled.size() - 1) {
      throw PreprocessError("client '" + traces[i].client_id +
                            "' has no test window after the training split");
    }
    pc.test = build_windows(pc.scaled, wc, pcfg.features, wc.effective_eval_stride(),
                            first_test);
  }
  return out;
}

}  // namespace fedcast
