#include "flowalign/config.hpp"

#include "flowalign/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace flowalign {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string dotted(std::string_view section, std::string_view key) {
  return std::string(section) + "." + std::string(key);
}

// Reads typed values out of one section and remembers which keys it was asked about, so
// anything left over can be reported as unknown.
class SectionReader {
 public:
  SectionReader(const ConfigFile& file, std::string section) : file_(file), section_(std::move(section)) {}

  const std::string* raw(std::string_view key) {
    known_.emplace(key);
    return file_.find(section_, key);
  }

  std::string require_string(std::string_view key) {
    known_.emplace(key);
    return file_.require(section_, key);
  }

  template <typename Int>
  Int parse_int(std::string_view key, const std::string& v) {
    Int out{};
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
      throw ConfigError("config key " + dotted(section_, key) + ": expected an integer, got '" + v + "'",
                        dotted(section_, key));
    }
    return out;
  }

  double parse_real(std::string_view key, const std::string& v) {
    try {
      const double d = parse_double(v);
      if (std::isfinite(d)) return d;
    } catch (const FormatError&) {
    }
    throw ConfigError("config key " + dotted(section_, key) + ": expected a finite number, got '" + v + "'",
                      dotted(section_, key));
  }

  bool parse_bool(std::string_view key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + dotted(section_, key) + ": expected true or false, got '" + v + "'",
                      dotted(section_, key));
  }

  template <typename Int>
  void integer(std::string_view key, Int& target) {
    if (const std::string* v = raw(key)) target = parse_int<Int>(key, *v);
  }
  void real(std::string_view key, double& target) {
    if (const std::string* v = raw(key)) target = parse_real(key, *v);
  }
  void boolean(std::string_view key, bool& target) {
    if (const std::string* v = raw(key)) target = parse_bool(key, *v);
  }
  void text(std::string_view key, std::string& target) {
    if (const std::string* v = raw(key)) target = *v;
  }
  template <typename Int>
  Int require_integer(std::string_view key) {
    return parse_int<Int>(key, require_string(key));
  }

  /// Wraps enum parsers so a bad value names its key.
  template <typename F>
  auto parsed(std::string_view key, const std::string& v, F&& parse) {
    try {
      return parse(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config key " + dotted(section_, key) + ": " + e.what(), dotted(section_, key));
    }
  }

  void reject_unknown() const {
    for (const auto& e : file_.entries()) {
      if (e.section == section_ && !known_.contains(e.key)) {
        throw ConfigError("unknown config key " + dotted(section_, e.key) + " (line " + std::to_string(e.line) + ")",
                          dotted(section_, e.key));
      }
    }
  }

 private:
  const ConfigFile& file_;
  std::string section_;
  std::set<std::string, std::less<>> known_;
};

const std::map<std::string, std::string, std::less<>> kMandatoryKey = {
    {"run", "seed"},        {"data", "kind"},      {"flownet", "preset"}, {"train", "preset"},
    {"align", "preset"},    {"landscape", "resolution"}, {"eval", "n_data"}, {"project", "kind"},
};

}  // namespace

// ---------------------------------------------------------------------------

ConfigFile ConfigFile::parse(std::string_view text, const std::string& source) {
  ConfigFile f;
  f.source_ = source;
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(where + ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!kMandatoryKey.contains(section)) throw ConfigError(where + ": unknown section [" + section + "]", section);
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (section.empty()) throw ConfigError(where + ": key '" + key + "' appears before any [section]", key);
    if (f.find(section, key) != nullptr) {
      throw ConfigError(where + ": duplicate key " + dotted(section, key), dotted(section, key));
    }
    f.entries_.push_back({section, key, value, line_no});
  }
  return f;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str(), path.string());
}

bool ConfigFile::has_section(std::string_view section) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.section == section; });
}

const std::string* ConfigFile::find(std::string_view section, std::string_view key) const {
  for (const Entry& e : entries_)
    if (e.section == section && e.key == key) return &e.value;
  return nullptr;
}

const std::string& ConfigFile::require(std::string_view section, std::string_view key) const {
  if (const std::string* v = find(section, key)) return *v;
  throw ConfigError("missing config key " + dotted(section, key) + " in " + source_, dotted(section, key));
}

std::string ConfigFile::canonical() const {
  std::vector<std::string> lines;
  for (const Entry& e : entries_) lines.push_back(dotted(e.section, e.key) + " = " + e.value);
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const std::string& l : lines) out += l + "\n";
  return out;
}

std::string ConfigFile::hash() const { return fnv1a_hex(canonical()); }

// ---------------------------------------------------------------------------

void LandscapeConfig::validate() const {
  if (!(hi > lo)) throw ConfigError("landscape: need lo < hi", "landscape.hi");
  if (resolution < 2 || resolution > 512) {
    throw ConfigError("landscape: resolution must lie in [2, 512], got " + std::to_string(resolution),
                      "landscape.resolution");
  }
  if (mc < 1 || knn_k < 1 || knn_dataset < knn_k || exact_steps < 1 || c_mc < 1 || kde_samples < 1 ||
      !(kde_bandwidth > 0.0)) {
    throw ConfigError("landscape: budgets must be positive and knn_dataset >= knn_k");
  }
}

DenseMatrix LandscapeConfig::nodes() const {
  DenseMatrix g(resolution * resolution, 2);
  const double step = (hi - lo) / static_cast<double>(resolution - 1);
  for (Index i = 0; i < resolution; ++i) {
    for (Index j = 0; j < resolution; ++j) {
      g(i * resolution + j, 0) = lo + step * static_cast<double>(j);
      g(i * resolution + j, 1) = lo + step * static_cast<double>(i);
    }
  }
  return g;
}

void EvalConfig::validate() const {
  if (n_data < 0 || n_uniform < 0 || n_data + n_uniform < 1) throw ConfigError("eval: need at least one point");
  if (!(hi > lo)) throw ConfigError("eval: need lo < hi", "eval.hi");
  if (mc < 1) throw ConfigError("eval: mc must be >= 1", "eval.mc");
  ode.validate();
}

ExperimentConfig ExperimentConfig::from(const ConfigFile& file) {
  ExperimentConfig c;
  c.config_hash = file.hash();
  c.config_text = file.canonical();
  for (const auto& e : file.entries()) c.sections.insert(e.section);

  auto guarded = [](const char* section, auto&& body) {
    try {
      body();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[") + section + "] " + e.what());
    }
  };

  if (file.has_section("run")) {
    SectionReader r(file, "run");
    c.seed = r.require_integer<std::uint64_t>("seed");
    c.output_dir = r.require_string("output_dir");
    r.reject_unknown();
  }

  if (file.has_section("data")) {
    SectionReader r(file, "data");
    const std::string kind = r.require_string("kind");
    c.data = ToyDistributionSpec::defaults(r.parsed("kind", kind, parse_toy_kind));
    c.n_samples = r.require_integer<Index>("n_samples");
    r.integer("components", c.data.components);
    r.real("radius", c.data.radius);
    r.real("std", c.data.std);
    r.real("extent", c.data.extent);
    r.real("noise", c.data.noise);
    r.real("turns", c.data.turns);
    if (const std::string* v = r.raw("normalization")) {
      if (*v != "none") c.data.normalization = r.parse_real("normalization", *v);
    }
    r.reject_unknown();
    if (c.n_samples < 0) throw ConfigError("data.n_samples must be >= 0", "data.n_samples");
    guarded("data", [&] { c.data.validate(); });
  }

  if (file.has_section("flownet")) {
    SectionReader r(file, "flownet");
    const std::string preset = r.require_string("preset");
    Index in_dim = kToyDim;
    r.integer("in_dim", in_dim);
    if (preset == "toy") {
      c.flownet = FlowNetConfig::toy();
      c.flownet.in_dim = in_dim;
    } else if (preset == "feature") {
      c.flownet = FlowNetConfig::feature(in_dim);
    } else {
      throw ConfigError("config key flownet.preset: expected toy or feature, got '" + preset + "'", "flownet.preset");
    }
    r.integer("hidden", c.flownet.hidden);
    r.integer("blocks", c.flownet.blocks);
    r.integer("time_embed_dim", c.flownet.time_embed_dim);
    r.real("time_scale", c.flownet.time_scale);
    r.reject_unknown();
    guarded("flownet", [&] { c.flownet.validate(); });
  }

  if (file.has_section("train")) {
    SectionReader r(file, "train");
    const std::string preset = r.require_string("preset");
    if (preset == "toy") {
      c.train = TrainConfig::toy();
    } else if (preset == "feature") {
      c.train = TrainConfig::feature();
    } else {
      throw ConfigError("config key train.preset: expected toy or feature, got '" + preset + "'", "train.preset");
    }
    r.integer("steps", c.train.steps);
    r.integer("batch", c.train.batch);
    r.real("lr", c.train.base_lr);
    r.real("beta1", c.train.beta1);
    r.real("beta2", c.train.beta2);
    r.real("weight_decay", c.train.weight_decay);
    if (const std::string* v = r.raw("lr_schedule")) c.train.lr_schedule = r.parsed("lr_schedule", *v, parse_lr_schedule);
    r.integer("warmup_steps", c.train.warmup_steps);
    r.real("max_grad_norm", c.train.max_grad_norm);
    r.real("ema_rate", c.train.ema_rate);
    r.integer("log_every", c.train.log_every);
    r.integer("checkpoint_every", c.train.checkpoint_every);
    r.boolean("use_ema", c.use_ema);
    std::string csv;
    r.text("data_csv", csv);
    c.train_data_csv = csv;
    r.reject_unknown();
    guarded("train", [&] { c.train.validate(); });
  }
  c.train.seed = c.seed;

  if (file.has_section("align")) {
    SectionReader r(file, "align");
    const std::string preset = r.require_string("preset");
    if (preset != "default") {
      throw ConfigError("config key align.preset: expected default, got '" + preset + "'", "align.preset");
    }
    AlignConfig& a = c.align.optimizer;
    r.integer("latents", a.latents);
    r.real("lr", a.lr);
    r.integer("steps", a.steps);
    r.real("beta1", a.beta1);
    r.real("beta2", a.beta2);
    r.integer("mc_samples", a.mc_samples);
    r.real("lambda", a.lambda);
    r.integer("snapshot_every", a.snapshot_every);
    r.integer("record_every", a.record_every);
    r.integer("record_mc", a.record_mc);
    r.integer("knn_k", c.align.knn_k);
    r.integer("knn_dataset", c.align.knn_dataset);
    r.reject_unknown();
    guarded("align", [&] { a.validate(); });
    if (c.align.knn_k < 1 || c.align.knn_dataset < c.align.knn_k) {
      throw ConfigError("align: need 1 <= knn_k <= knn_dataset", "align.knn_k");
    }
  }
  c.align.optimizer.seed = c.seed;

  if (file.has_section("landscape")) {
    SectionReader r(file, "landscape");
    LandscapeConfig& l = c.landscape;
    l.resolution = r.require_integer<Index>("resolution");
    r.real("lo", l.lo);
    r.real("hi", l.hi);
    r.integer("mc", l.mc);
    r.integer("knn_k", l.knn_k);
    r.integer("knn_dataset", l.knn_dataset);
    r.boolean("exact", l.exact);
    r.integer("exact_steps", l.exact_steps);
    r.integer("c_mc", l.c_mc);
    r.integer("kde_samples", l.kde_samples);
    r.real("kde_bandwidth", l.kde_bandwidth);
    r.reject_unknown();
    l.validate();
  }

  if (file.has_section("eval")) {
    SectionReader r(file, "eval");
    EvalConfig& e = c.eval;
    e.n_data = r.require_integer<Index>("n_data");
    r.integer("n_uniform", e.n_uniform);
    r.real("lo", e.lo);
    r.real("hi", e.hi);
    r.integer("mc", e.mc);
    r.integer("ode_steps", e.ode.steps);
    if (const std::string* v = r.raw("ode_method")) e.ode.method = r.parsed("ode_method", *v, parse_ode_method);
    r.reject_unknown();
    e.validate();
  }

  if (file.has_section("project")) {
    SectionReader r(file, "project");
    const std::string kind = r.require_string("kind");
    c.project.kind = r.parsed("kind", kind, parse_projection_kind);
    c.project.target_dim = r.require_integer<Index>("target_dim");
    r.boolean("jl_rescale", c.project.jl_rescale);
    r.reject_unknown();
    if (c.project.target_dim < 1) throw ConfigError("project.target_dim must be >= 1", "project.target_dim");
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  return from(ConfigFile::load(path));
}

void ExperimentConfig::require_section(std::string_view section) const {
  if (sections.contains(std::string(section))) return;
  const auto it = kMandatoryKey.find(section);
  const std::string key = it == kMandatoryKey.end() ? std::string(section) : dotted(section, it->second);
  throw ConfigError("missing config key " + key + " (section [" + std::string(section) + "] is absent)", key);
}

}  // namespace flowalign
