#include "fedcast/experiment.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <concepts>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedcast/analysis.hpp"
#include "fedcast/format.hpp"
#include "fedcast/kernels.hpp"

namespace fs = std::filesystem;

namespace fedcast {
namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += "\n  " + p;
  return msg;
}

bool parse_into(const std::string& text, double& out) {
  const auto v = parse_number(text);
  if (!v || !std::isfinite(*v)) return false;
  out = *v;
  return true;
}

template <std::unsigned_integral Int>
  requires(!std::same_as<Int, bool>)
bool parse_into(const std::string& text, Int& out) {
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_into(const std::string& text, bool& out) {
  std::string t;
  for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "true" || t == "1" || t == "yes" || t == "on") {
    out = true;
    return true;
  }
  if (t == "false" || t == "0" || t == "no" || t == "off") {
    out = false;
    return true;
  }
  return false;
}

bool parse_into(const std::string& text, std::string& out) {
  out = text;
  return true;
}

const char* type_name(double) { return "a finite number"; }
template <std::unsigned_integral Int>
  requires(!std::same_as<Int, bool>)
const char* type_name(Int) {
  return "a non-negative integer";
}
const char* type_name(bool) { return "true or false"; }
const char* type_name(const std::string&) { return "text"; }

// Tracks which keys were consumed so leftovers can be reported as unknown.
class Reader {
 public:
  Reader(const KeyValueDoc& doc, std::vector<std::string>& problems)
      : doc_(doc), problems_(problems) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) {
    used_.insert(section + "." + key);
    return doc_.get(section, key);
  }

  template <class T>
  bool read(const std::string& section, const std::string& key, T& dst) {
    auto v = raw(section, key);
    if (!v) return false;
    T tmp{};
    if (!parse_into(*v, tmp)) {
      problem(section + "." + key, std::string("expected ") + type_name(tmp) + ", got '" + *v + "'");
      return false;
    }
    dst = tmp;
    return true;
  }

  void problem(const std::string& field, const std::string& what) {
    problems_.push_back(field + ": " + what);
  }

  void report_unknown() {
    for (const auto& e : doc_.entries()) {
      if (!used_.count(e.section + "." + e.key)) {
        problems_.push_back(e.section + "." + e.key + ": unknown key (line " +
                            std::to_string(e.line) + ")");
      }
    }
  }

 private:
  const KeyValueDoc& doc_;
  std::vector<std::string>& problems_;
  std::set<std::string> used_;
};

template <class F>
void check(std::vector<std::string>& problems, const std::string& field, F&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    problems.push_back(field + ": " + e.what());
  }
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

ExperimentConfig parse_config(const KeyValueDoc& doc, const fs::path& base_dir,
                              const ConfigOverrides& overrides) {
  std::vector<std::string> problems;
  Reader rd(doc, problems);
  ExperimentConfig cfg;

  // [experiment]
  std::uint64_t seed = 0;
  const bool has_seed = rd.read("experiment", "seed", seed);
  if (overrides.seed) {
    cfg.seed = *overrides.seed;
  } else if (has_seed) {
    cfg.seed = seed;
  } else if (!rd.raw("experiment", "seed")) {
    rd.problem("experiment.seed", "a master seed is required (config or --seed)");
  }
  if (auto out = rd.raw("experiment", "out")) cfg.out_dir = base_dir / *out;
  if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;

  // [data]
  std::string source = "synthetic";
  rd.read("data", "source", source);
  if (lower(source) == "synthetic") {
    cfg.data = DataKind::kSynthetic;
  } else if (lower(source) == "files") {
    cfg.data = DataKind::kFiles;
  } else {
    rd.problem("data.source", "expected 'synthetic' or 'files', got '" + source + "'");
  }
  if (auto files = rd.raw("data", "files")) {
    for (const auto& f : split_list(*files)) {
      fs::path p = fs::path(f).is_absolute() ? fs::path(f) : base_dir / f;
      if (!fs::exists(p)) rd.problem("data.files", "no such file '" + p.string() + "'");
      cfg.files.push_back(p.lexically_normal());
    }
  }
  if (auto m = rd.raw("data", "mapping")) {
    fs::path p = fs::path(*m).is_absolute() ? fs::path(*m) : base_dir / *m;
    if (!fs::exists(p)) {
      rd.problem("data.mapping", "no such file '" + p.string() + "'");
    } else {
      check(problems, "data.mapping", [&] { ColumnMapping::load(p).validate(); });
    }
    cfg.mapping = p.lexically_normal();
  }
  if (cfg.data == DataKind::kFiles && cfg.files.empty()) {
    rd.problem("data.files", "at least one trace file is required when source = files");
  }
  rd.read("data", "sample_period", cfg.sample_period);
  if (!(cfg.sample_period > 0.0)) rd.problem("data.sample_period", "must be positive");
  rd.read("data", "max_gap", cfg.max_gap);

  // [synthetic]
  auto& syn = cfg.synthetic;
  rd.read("synthetic", "clients", syn.clients);
  rd.read("synthetic", "length", syn.length);
  rd.read("synthetic", "offset_min", syn.offset_min);
  rd.read("synthetic", "offset_max", syn.offset_max);
  rd.read("synthetic", "amplitude_ratio", syn.amplitude_ratio);
  rd.read("synthetic", "noise_ratio", syn.noise_ratio);
  if (cfg.data == DataKind::kSynthetic) {
    if (syn.clients == 0) rd.problem("synthetic.clients", "must be >= 1");
    if (syn.offset_max < syn.offset_min) {
      rd.problem("synthetic.offset_max", "must be >= synthetic.offset_min");
    }
    if (syn.clients > 0) check(problems, "synthetic", [&] { syn.spec().validate(); });
  }

  // [preprocess]
  rd.read("preprocess", "filter_window", cfg.preprocess.filter_window);
  if (cfg.preprocess.filter_window == 0) rd.problem("preprocess.filter_window", "must be >= 1");
  if (auto s = rd.raw("preprocess", "scaler")) {
    if (lower(*s) == "minmax") {
      cfg.preprocess.scaler_kind = ScalerKind::kMinMax;
    } else if (lower(*s) == "standard") {
      cfg.preprocess.scaler_kind = ScalerKind::kStandard;
    } else {
      rd.problem("preprocess.scaler", "expected 'minmax' or 'standard', got '" + *s + "'");
    }
  }
  if (auto s = rd.raw("preprocess", "scope")) {
    if (lower(*s) == "client") {
      cfg.preprocess.scaling_scope = ScalingScope::kPerClient;
    } else if (lower(*s) == "dataset") {
      cfg.preprocess.scaling_scope = ScalingScope::kPerDataset;
    } else {
      rd.problem("preprocess.scope", "expected 'client' or 'dataset', got '" + *s + "'");
    }
  }
  if (auto s = rd.raw("preprocess", "features")) {
    cfg.preprocess.features = split_list(*s);
    if (lower(*s) == "none") cfg.preprocess.features.clear();
    for (const auto& f : cfg.preprocess.features) {
      const auto& known = continuous_fields();
      if (f == "throughput") {
        rd.problem("preprocess.features", "throughput history is always included; drop it here");
      } else if (std::find(known.begin(), known.end(), f) == known.end() &&
                 cfg.data == DataKind::kSynthetic) {
        rd.problem("preprocess.features", "unknown feature '" + f + "'");
      }
    }
  }
  rd.read("preprocess", "train_ratio", cfg.train_ratio);
  if (!(cfg.train_ratio > 0.0 && cfg.train_ratio < 1.0)) {
    rd.problem("preprocess.train_ratio", "must lie in (0, 1)");
  }

  // [window]
  rd.read("window", "history", cfg.window.history);
  rd.read("window", "horizon", cfg.window.horizon);
  rd.read("window", "train_stride", cfg.window.train_stride);
  rd.read("window", "eval_stride", cfg.window.eval_stride);
  if (cfg.window.history == 0) rd.problem("window.history", "must be >= 1");
  if (cfg.window.horizon == 0) rd.problem("window.horizon", "must be >= 1");
  if (cfg.window.train_stride == 0) rd.problem("window.train_stride", "must be >= 1");

  // [model]
  auto& m = cfg.model;
  if (auto a = rd.raw("model", "arch")) {
    check(problems, "model.arch", [&] { m.arch = parse_arch(*a); });
  }
  m.input_features = cfg.preprocess.features.size();
  m.history = cfg.window.history;
  m.horizon = cfg.window.horizon;
  rd.read("model", "hidden", m.hidden);
  rd.read("model", "layers", m.layers);
  rd.read("model", "conv_channels", m.conv_channels);
  rd.read("model", "num_heads", m.num_heads);
  rd.read("model", "ff_hidden", m.ff_hidden);
  rd.read("model", "head_hidden", m.head_hidden);
  rd.read("model", "positional_encoding", m.positional_encoding);
  if (auto bn = rd.raw("model", "batchnorm")) {
    const std::string v = lower(*bn);
    if (v == "all" || v == "true") {
      m.batchnorm.clear();
    } else if (v == "none" || v == "false") {
      m.batchnorm.assign(m.batchnorm_sites(), false);
    } else {
      m.batchnorm.clear();
      for (const auto& item : split_list(v)) {
        bool flag = false;
        if (!parse_into(item, flag)) {
          rd.problem("model.batchnorm", "expected all, none or a list of 0/1, got '" + *bn + "'");
          m.batchnorm.clear();
          break;
        }
        m.batchnorm.push_back(flag);
      }
    }
  }
  check(problems, "model", [&] { m.validate(); });

  // [train]
  cfg.train.learning_rate = default_learning_rate(m.arch);
  cfg.train.local_epochs = default_local_epochs(m.arch);
  rd.read("train", "learning_rate", cfg.train.learning_rate);
  rd.read("train", "batch_size", cfg.train.batch_size);
  rd.read("train", "local_epochs", cfg.train.local_epochs);
  if (auto o = rd.raw("train", "optimizer")) {
    if (lower(*o) == "adam") {
      cfg.train.optimizer = OptimizerKind::kAdam;
    } else if (lower(*o) == "sgd") {
      cfg.train.optimizer = OptimizerKind::kSgd;
    } else {
      rd.problem("train.optimizer", "expected 'adam' or 'sgd', got '" + *o + "'");
    }
  }
  rd.read("train", "prox_include_batchnorm", cfg.train.prox_include_batchnorm);
  check(problems, "train", [&] { cfg.train.validate(); });

  // [federation]
  rd.read("federation", "rounds", cfg.round.total_rounds);
  rd.read("federation", "participation", cfg.round.participation_fraction);
  rd.read("federation", "aggregate_running_stats", cfg.round.aggregate_running_stats);
  if (auto s = rd.raw("federation", "strategy")) {
    check(problems, "federation.strategy", [&] { cfg.round.strategy.kind = parse_strategy(*s); });
  }
  const bool has_mu = rd.read("federation", "mu", cfg.round.strategy.mu);
  if (cfg.round.strategy.kind == StrategyKind::kFedProx && !has_mu) {
    rd.problem("federation.mu", "required when strategy = fedprox (no default)");
  } else {
    if (cfg.round.strategy.kind != StrategyKind::kFedProx) cfg.round.strategy.mu = 0.0;
    check(problems, "federation", [&] { cfg.round.validate(); });
  }
  cfg.round.seed = cfg.seed;

  // [analyze]
  if (auto h = rd.raw("analyze", "horizons")) {
    cfg.analyze.horizons.clear();
    for (const auto& item : split_list(*h)) {
      std::size_t v = 0;
      if (!parse_into(item, v)) {
        rd.problem("analyze.horizons", "expected a list of non-negative integers, got '" + *h + "'");
        break;
      }
      cfg.analyze.horizons.push_back(v);
    }
  }
  rd.read("analyze", "kde_points", cfg.analyze.kde_points);
  rd.read("analyze", "kde_bandwidth", cfg.analyze.kde_bandwidth);
  if (cfg.analyze.kde_points < 2) rd.problem("analyze.kde_points", "must be >= 2");
  if (!(cfg.analyze.kde_bandwidth > 0.0)) rd.problem("analyze.kde_bandwidth", "must be positive");

  // [stream]
  auto& st = cfg.stream;
  if (auto l = rd.raw("stream", "ladder_kbps")) {
    st.ladder_kbps.clear();
    for (const auto& item : split_list(*l)) {
      double v = 0.0;
      if (!parse_into(item, v)) {
        rd.problem("stream.ladder_kbps", "expected a list of numbers, got '" + *l + "'");
        break;
      }
      st.ladder_kbps.push_back(v);
    }
  }
  rd.read("stream", "segment_len", st.segment_len);
  rd.read("stream", "chunks_per_segment", st.chunks_per_segment);
  rd.read("stream", "playback_threshold", st.playback_threshold);
  rd.read("stream", "max_latency", st.max_latency);
  rd.read("stream", "join_prefetch_max", st.join_prefetch_max);
  rd.read("stream", "join_lead_segments", st.join_lead_segments);
  rd.read("stream", "start_after", st.start_after);
  rd.read("stream", "rtt", st.rtt_overhead);
  rd.read("stream", "mpc_horizon", st.mpc_horizon);
  rd.read("stream", "session_len", st.session_len);
  rd.read("stream", "clients", cfg.stream_clients);
  check(problems, "stream", [&] { st.validate(); });
  auto& q = cfg.qoe;
  rd.read("stream", "mu1", q.mu1);
  rd.read("stream", "mu2", q.mu2);
  rd.read("stream", "mu3", q.mu3);
  rd.read("stream", "mu4", q.mu4);
  rd.read("stream", "mu5", q.mu5);
  rd.read("stream", "omega", q.omega);
  if (!st.ladder_kbps.empty()) q.r_min_kbps = st.ladder_kbps.front();
  check(problems, "stream", [&] { q.validate(); });

  rd.report_unknown();
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

ExperimentConfig load_config(const fs::path& path, const ConfigOverrides& overrides) {
  if (!fs::exists(path)) throw ConfigError({"config: no such file '" + path.string() + "'"});
  KeyValueDoc doc;
  try {
    doc = KeyValueDoc::load(path);
  } catch (const std::exception& e) {
    throw ConfigError({std::string("config: ") + e.what()});
  }
  return parse_config(doc, path.parent_path(), overrides);
}

std::string echo_config(const ExperimentConfig& cfg) {
  std::ostringstream o;
  auto num = [](double v) { return format_number(v); };
  auto b = [](bool v) { return v ? "true" : "false"; };
  o << "[experiment]\nseed = " << cfg.seed << "\n\n";

  o << "[data]\nsource = " << (cfg.data == DataKind::kSynthetic ? "synthetic" : "files") << '\n';
  if (cfg.data == DataKind::kFiles) {
    std::vector<std::string> files;
    for (const auto& f : cfg.files) files.push_back(f.string());
    o << "files = " << join(files) << '\n';
    if (cfg.mapping) o << "mapping = " << cfg.mapping->string() << '\n';
  }
  o << "sample_period = " << num(cfg.sample_period) << "\nmax_gap = " << cfg.max_gap << "\n\n";

  const auto& s = cfg.synthetic;
  o << "[synthetic]\nclients = " << s.clients << "\nlength = " << s.length
    << "\noffset_min = " << num(s.offset_min) << "\noffset_max = " << num(s.offset_max)
    << "\namplitude_ratio = " << num(s.amplitude_ratio)
    << "\nnoise_ratio = " << num(s.noise_ratio) << "\n\n";

  const auto& p = cfg.preprocess;
  o << "[preprocess]\nfilter_window = " << p.filter_window
    << "\nscaler = " << (p.scaler_kind == ScalerKind::kMinMax ? "minmax" : "standard")
    << "\nscope = " << (p.scaling_scope == ScalingScope::kPerClient ? "client" : "dataset")
    << "\nfeatures = " << (p.features.empty() ? "none" : join(p.features))
    << "\ntrain_ratio = " << num(cfg.train_ratio) << "\n\n";

  const auto& w = cfg.window;
  o << "[window]\nhistory = " << w.history << "\nhorizon = " << w.horizon
    << "\ntrain_stride = " << w.train_stride << "\neval_stride = " << w.eval_stride << "\n\n";

  const auto& m = cfg.model;
  std::string bn = "all";
  if (!m.batchnorm.empty()) {
    bn.clear();
    for (std::size_t i = 0; i < m.batchnorm.size(); ++i) bn += (i ? "," : "") + std::string(m.batchnorm[i] ? "1" : "0");
  }
  o << "[model]\narch = " << to_string(m.arch) << "\nhidden = " << m.hidden
    << "\nlayers = " << m.layers << "\nconv_channels = " << m.conv_channels
    << "\nnum_heads = " << m.num_heads << "\nff_hidden = " << m.ff_hidden
    << "\nhead_hidden = " << m.head_hidden << "\npositional_encoding = " << b(m.positional_encoding)
    << "\nbatchnorm = " << bn << "\n\n";

  const auto& t = cfg.train;
  o << "[train]\nlearning_rate = " << num(t.learning_rate) << "\nbatch_size = " << t.batch_size
    << "\nlocal_epochs = " << t.local_epochs
    << "\noptimizer = " << (t.optimizer == OptimizerKind::kAdam ? "adam" : "sgd")
    << "\nprox_include_batchnorm = " << b(t.prox_include_batchnorm) << "\n\n";

  const auto& r = cfg.round;
  o << "[federation]\nrounds = " << r.total_rounds << "\nparticipation = "
    << num(r.participation_fraction) << "\nstrategy = " << to_string(r.strategy.kind) << '\n';
  if (r.strategy.kind == StrategyKind::kFedProx) o << "mu = " << num(r.strategy.mu) << '\n';
  o << "aggregate_running_stats = " << b(r.aggregate_running_stats) << "\n\n";

  std::vector<std::string> hz;
  for (auto h : cfg.analyze.horizons) hz.push_back(std::to_string(h));
  o << "[analyze]\nhorizons = " << join(hz) << "\nkde_points = " << cfg.analyze.kde_points
    << "\nkde_bandwidth = " << num(cfg.analyze.kde_bandwidth) << "\n\n";

  const auto& st = cfg.stream;
  std::vector<std::string> ladder;
  for (double v : st.ladder_kbps) ladder.push_back(num(v));
  const auto& q = cfg.qoe;
  o << "[stream]\nladder_kbps = " << join(ladder) << "\nsegment_len = " << num(st.segment_len)
    << "\nchunks_per_segment = " << st.chunks_per_segment
    << "\nplayback_threshold = " << num(st.playback_threshold)
    << "\nmax_latency = " << num(st.max_latency)
    << "\njoin_prefetch_max = " << st.join_prefetch_max
    << "\njoin_lead_segments = " << st.join_lead_segments
    << "\nstart_after = " << st.start_after << "\nrtt = " << num(st.rtt_overhead)
    << "\nmpc_horizon = " << st.mpc_horizon << "\nsession_len = " << num(st.session_len)
    << "\nclients = " << cfg.stream_clients << "\nmu1 = " << num(q.mu1) << "\nmu2 = "
    << num(q.mu2) << "\nmu3 = " << num(q.mu3) << "\nmu4 = " << num(q.mu4)
    << "\nmu5 = " << num(q.mu5) << "\nomega = " << num(q.omega) << '\n';
  return o.str();
}

std::vector<ClientTrace> load_sources(const ExperimentConfig& cfg) {
  std::vector<ClientTrace> traces;
  if (cfg.data == DataKind::kSynthetic) {
    traces = generate_synthetic(cfg.synthetic.spec(), derive_seed(cfg.seed, "generator"));
  } else {
    const ColumnMapping mapping = cfg.mapping ? ColumnMapping::load(*cfg.mapping)
                                              : ColumnMapping::canonical();
    for (const auto& f : cfg.files) {
      LoadResult r = load_trace(f, mapping);
      if (r.trace.client_id.empty()) r.trace.client_id = f.stem().string();
      traces.push_back(clean_and_resample(r.trace, cfg.sample_period, cfg.max_gap));
    }
  }
  std::set<std::string> ids;
  for (const auto& t : traces) {
    if (!ids.insert(t.client_id).second) {
      throw TraceError("duplicate client id '" + t.client_id + "'");
    }
  }
  return traces;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

using Json = nlohmann::ordered_json;

Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

Json config_json(const ExperimentConfig& cfg) {
  std::istringstream in(echo_config(cfg));
  const KeyValueDoc doc = KeyValueDoc::parse(in);
  Json out = Json::object();
  for (const auto& e : doc.entries()) out[e.section][e.key] = e.value;
  return out;
}

std::vector<PreparedClient> prepare(const ExperimentConfig& cfg,
                                    const std::vector<ClientTrace>& traces) {
  const std::size_t need = cfg.window.history + cfg.window.horizon + 1;
  for (const auto& t : traces) {
    if (t.size() < need) {
      throw PreprocessError("client " + t.client_id + " has " + std::to_string(t.size()) +
                            " rows; windows need more than " + std::to_string(need));
    }
  }
  return prepare_clients(traces, cfg.preprocess, cfg.window, cfg.train_ratio);
}

fs::path checkpoint_path(const ExperimentConfig& cfg, const std::string& client_id) {
  return cfg.out_dir / "checkpoints" / (client_id + ".params");
}

std::string params_text(const ParamSet& p, const std::map<std::string, std::string>& header) {
  std::ostringstream o;
  write_params(o, p, header);
  return o.str();
}

Json client_metrics_json(const ClientRoundMetrics& m) {
  Json j;
  j["client_id"] = m.client_id;
  j["r2"] = number(m.r2);
  j["mse"] = number(m.mse);
  return j;
}

Json qoe_json(const SessionResult& r) {
  Json j;
  j["quality"] = number(r.qoe.quality);
  j["stall"] = number(r.qoe.stall);
  j["switches"] = number(r.qoe.switches);
  j["latency"] = number(r.qoe.latency);
  j["skip"] = number(r.qoe.skip);
  j["qoe"] = number(r.qoe.qoe);
  j["segments"] = r.qoe.segments;
  j["normalized"] = number(r.qoe.normalized);
  j["startup_time"] = number(r.startup_time);
  j["played"] = number(r.played);
  return j;
}

}  // namespace

FederateOutput run_federate(const ExperimentConfig& cfg) {
  const auto traces = load_sources(cfg);
  const auto prepared = prepare(cfg, traces);
  FederateOutput out;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    out.clients.push_back(make_client(traces[i].client_id, prepared[i]));
  }
  FederationContext ctx{cfg.model, cfg.train, cfg.round};
  std::ostringstream rounds;
  write_round_csv_header(rounds);
  out.result = run_experiment(out.clients, ctx,
                              [&](const RoundReport& r) { write_round_csv(rounds, r); });

  auto header = cfg.model.to_header();
  header["strategy"] = to_string(cfg.round.strategy.kind);
  header["rounds"] = std::to_string(cfg.round.total_rounds);
  write_file_atomic(cfg.out_dir / "checkpoints" / "global.params",
                    params_text(out.result.global, header));
  for (const auto& c : out.clients) {
    write_file_atomic(checkpoint_path(cfg, c.client_id), params_text(c.local, header));
  }
  write_file_atomic(cfg.out_dir / "rounds.csv", rounds.str());

  Json summary;
  summary["config"] = config_json(cfg);
  Json per_round = Json::array();
  for (const auto& r : out.result.reports) {
    Json j;
    j["round"] = r.round;
    j["mean_r2"] = number(r.mean_r2);
    j["var_r2"] = number(r.var_r2);
    j["participants"] = r.participants;
    per_round.push_back(j);
  }
  summary["rounds"] = per_round;
  Json final_clients = Json::array();
  std::vector<double> r2s;
  for (const auto& c : out.clients) {
    const auto m = evaluate_client(cfg.model, c);
    if (std::isfinite(m.r2)) r2s.push_back(m.r2);
    final_clients.push_back(client_metrics_json(m));
  }
  double mean = std::nan(""), var = std::nan("");
  if (!r2s.empty()) {
    mean = 0.0;
    for (double v : r2s) mean += v;
    mean /= static_cast<double>(r2s.size());
    var = 0.0;
    for (double v : r2s) var += (v - mean) * (v - mean);
    var /= static_cast<double>(r2s.size());
  }
  summary["final"] = {{"initial_params_only", cfg.round.total_rounds == 0},
                      {"mean_r2", number(mean)},
                      {"var_r2", number(var)},
                      {"clients", final_clients}};
  write_file_atomic(cfg.out_dir / "summary.json", summary.dump(2) + "\n");
  write_file_atomic(cfg.out_dir / "config.ini", echo_config(cfg));
  return out;
}

void run_analyze(const ExperimentConfig& cfg) {
  const auto traces = load_sources(cfg);
  std::vector<std::string> features = cfg.preprocess.features;
  features.push_back("throughput");

  std::ostringstream corr;
  corr << "client_id,feature";
  for (auto h : cfg.analyze.horizons) corr << ",F=" << h;
  corr << '\n';
  for (const auto& t : traces) {
    const auto table = correlation_table(t, features, cfg.analyze.horizons);
    for (std::size_t i = 0; i < table.features.size(); ++i) {
      corr << t.client_id << ',' << table.features[i];
      for (double r : table.rho[i]) corr << ',' << format_number(r);
      corr << '\n';
    }
  }

  // Normalized over the pooled cohort so client offsets stay visible.
  std::vector<double> pooled;
  for (const auto& t : traces) {
    for (const auto& r : t.records) pooled.push_back(r.throughput);
  }
  const auto normalized = minmax_normalize(pooled);
  const auto grid = linspace(0.0, 1.0, cfg.analyze.kde_points);
  std::vector<std::vector<double>> curves;
  std::size_t at = 0;
  for (const auto& t : traces) {
    std::span<const double> values(normalized.data() + at, t.size());
    at += t.size();
    curves.push_back(gaussian_kde(values, grid, cfg.analyze.kde_bandwidth));
  }
  std::ostringstream kde;
  kde << "x";
  for (const auto& t : traces) kde << ',' << t.client_id;
  kde << '\n';
  for (std::size_t g = 0; g < grid.size(); ++g) {
    kde << format_number(grid[g]);
    for (const auto& c : curves) kde << ',' << format_number(c[g]);
    kde << '\n';
  }
  write_file_atomic(cfg.out_dir / "correlation.csv", corr.str());
  write_file_atomic(cfg.out_dir / "kde.csv", kde.str());
  write_file_atomic(cfg.out_dir / "config.ini", echo_config(cfg));
}

void run_stream(const ExperimentConfig& cfg) {
  const auto traces = load_sources(cfg);
  const auto prepared = prepare(cfg, traces);
  const std::size_t n = cfg.stream_clients == 0 ? traces.size()
                                                 : std::min(cfg.stream_clients, traces.size());

  struct Loaded {
    ModelSpec spec;
    ParamSet params;
    std::vector<double> session;
  };
  std::vector<Loaded> loaded(n);
  for (std::size_t i = 0; i < n; ++i) {
    const fs::path ckpt = checkpoint_path(cfg, traces[i].client_id);
    std::ifstream in(ckpt);
    if (!in) {
      throw std::runtime_error("missing checkpoint " + ckpt.string() + "; run federate first");
    }
    std::map<std::string, std::string> header;
    loaded[i].params = read_params(in, &header);
    loaded[i].spec = ModelSpec::from_header(header);
    if (loaded[i].spec.input_features != cfg.preprocess.features.size()) {
      throw std::runtime_error("checkpoint " + ckpt.string() +
                               " was trained on a different feature set");
    }
    const auto tput = prepared[i].filtered.throughput();
    loaded[i].session.assign(tput.begin() + static_cast<long>(prepared[i].fit_rows), tput.end());
    if (static_cast<double>(loaded[i].session.size()) < cfg.stream.session_len) {
      throw StreamError("client " + traces[i].client_id + " has " +
                        std::to_string(loaded[i].session.size()) +
                        " test seconds, fewer than stream.session_len");
    }
  }

  static const char* kNames[] = {"model", "harmonic", "oracle"};
  std::vector<std::array<SessionResult, 3>> results(n);
  std::vector<std::exception_ptr> failures(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < count; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    try {
      ModelPredictor model(loaded[i].spec, loaded[i].params, prepared[i].scaled,
                           prepared[i].scaler, cfg.preprocess.features, prepared[i].fit_rows);
      HarmonicMeanPredictor harmonic;
      OraclePredictor oracle(loaded[i].session);
      Predictor* preds[] = {&model, &harmonic, &oracle};
      for (std::size_t p = 0; p < 3; ++p) {
        results[i][p] = simulate_session(loaded[i].session, *preds[p], cfg.stream, cfg.qoe);
      }
    } catch (...) {
      failures[i] = std::current_exception();
    }
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  Json doc;
  doc["session_len"] = cfg.stream.session_len;
  Json clients = Json::array();
  std::array<double, 3> sums{};
  for (std::size_t i = 0; i < n; ++i) {
    Json c;
    c["client_id"] = traces[i].client_id;
    for (std::size_t p = 0; p < 3; ++p) {
      c[kNames[p]] = qoe_json(results[i][p]);
      sums[p] += results[i][p].qoe.normalized;
      std::ostringstream log;
      write_event_log(log, results[i][p].events);
      write_file_atomic(cfg.out_dir / "events" / (traces[i].client_id + "-" + kNames[p] + ".csv"),
                        log.str());
    }
    clients.push_back(c);
  }
  doc["clients"] = clients;
  Json means;
  for (std::size_t p = 0; p < 3; ++p) means[kNames[p]] = number(sums[p] / static_cast<double>(n));
  doc["mean_normalized_qoe"] = means;
  write_file_atomic(cfg.out_dir / "qoe.json", doc.dump(2) + "\n");
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"fedcast: federated throughput forecasting and live-streaming experiments"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int workers = 0;
  for (const char* name : {"federate", "analyze", "stream", "all"}) {
    const std::string desc = std::string(name) == "federate" ? "train the cohort and write round reports"
                             : std::string(name) == "analyze" ? "correlation and density exports"
                             : std::string(name) == "stream"  ? "replay test traces through the streaming simulator"
                                                              : "federate, analyze and stream in sequence";
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "experiment configuration")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  const auto* sub = app.get_subcommands().front();

  ConfigOverrides ov;
  if (sub->count("--seed") > 0) ov.seed = seed;
  if (!out_dir.empty()) ov.out_dir = out_dir;

  ExperimentConfig cfg;
  try {
    cfg = load_config(config_path, ov);
    std::vector<std::string> problems;
    if (cfg.out_dir.empty()) problems.push_back("experiment.out: no output directory (config or --out)");
    if (cmd != "analyze" && cfg.data == DataKind::kSynthetic &&
        cfg.synthetic.length <= cfg.window.history + cfg.window.horizon + 1) {
      problems.push_back("synthetic.length: must exceed window.history + window.horizon + 1");
    }
    if (!problems.empty()) throw ConfigError(problems);
  } catch (const ConfigError& e) {
    std::cerr << "fedcast: " << e.what() << '\n';
    return 1;
  }
  if (workers > 0) kernels::set_threads(workers);

  try {
    if (cmd == "federate" || cmd == "all") run_federate(cfg);
    if (cmd == "analyze" || cmd == "all") run_analyze(cfg);
    if (cmd == "stream" || cmd == "all") run_stream(cfg);
  } catch (const std::exception& e) {
    std::cerr << "fedcast: " << cmd << " failed: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace fedcast
