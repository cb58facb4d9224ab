#include "sparseloc/config.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace sparseloc::cli {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw config_error("config: bad number for " + key + ": '" + v + "'");
  }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw config_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw config_error("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Consumes keys from the flat map, remembering which were touched so
/// unknown keys can be reported afterwards.
class KeyReader {
 public:
  explicit KeyReader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& key) {
    used_.insert(key);
    return kv_.count(key) > 0;
  }
  std::string str(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }
  double num(const std::string& key, double fallback) {
    used_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : to_double(key, it->second);
  }
  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    used_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : to_int(key, it->second);
  }
  bool boolean(const std::string& key, bool fallback) {
    used_.insert(key);
    const auto it = kv_.find(key);
    return it == kv_.end() ? fallback : to_bool(key, it->second);
  }
  void reject_unknown() const {
    for (const auto& [key, value] : kv_)
      if (!used_.count(key))
        throw config_error("config: unknown key '" + key + "'");
  }

 private:
  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

}  // namespace

std::map<std::string, std::string> parse_ini(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t comment = line.find_first_of("#;");
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw config_error(path + ":" + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw config_error(path + ":" + std::to_string(lineno) + ": empty key");
    kv[section.empty() ? key : section + "." + key] = value;
  }
  return kv;
}

void RunConfig::validate() const {
  if (!seed_set)
    throw config_error("config: a seed is required (run.seed or --seed)");
  if (out_dir.empty()) throw config_error("config: run.out_dir is required");
  quant.validate();
  arch.validate();
  train.trainer.validate();
  eval.recall.validate();
  if (eval.database != "test" && eval.database != "train+test")
    throw config_error("config: eval.database must be 'test' or 'train+test'");
  if (eval.max_range < 0) throw config_error("config: eval.max_range must be >= 0");
  if (eval.max_points < 0) throw config_error("config: eval.max_points must be >= 0");
  if (dataset.split_mode != "spatial" && dataset.split_mode != "by_run")
    throw config_error("config: dataset.split_mode must be 'spatial' or 'by_run'");
  if (dataset.format != "kitti" && dataset.format != "quad_f64" &&
      dataset.format != "quad_f64_legacy" && dataset.format != "synthetic")
    throw config_error("config: unknown dataset.format '" + dataset.format + "'");
  if (dataset.intensity_scale != "none" && dataset.intensity_scale != "auto") {
    try {
      if (!(std::stod(dataset.intensity_scale) > 0))
        throw config_error("config: dataset.intensity_scale must be positive");
    } catch (const config_error&) {
      throw;
    } catch (const std::exception&) {
      throw config_error("config: dataset.intensity_scale must be "
                         "'none', 'auto' or a positive number");
    }
  }
  // input files named by the config must exist before any compute starts
  namespace fs = std::filesystem;
  if (!checkpoint.empty() && !fs::exists(checkpoint))
    throw config_error("config: checkpoint does not exist: " + checkpoint);
  if (!train.resume.empty() && !fs::exists(train.resume))
    throw config_error("config: resume checkpoint does not exist: " + train.resume);
  if (!dataset.pose_index.empty() && !fs::exists(dataset.pose_index))
    throw config_error("config: pose index does not exist: " + dataset.pose_index);
  for (const TestSquare& s : dataset.split.test_squares)
    if (!(s.side > 0)) throw config_error("config: degenerate test square");
  if (dataset.split.buffer_width < 0)
    throw config_error("config: negative split buffer");
  if (!ablate.axis.empty() && ablate.axis != "r_step" &&
      ablate.axis != "theta_step" && ablate.axis != "max_range" &&
      ablate.axis != "points")
    throw config_error("config: unknown ablate.axis '" + ablate.axis + "'");
  if (bench.repeats < 1) throw config_error("config: bench.repeats must be >= 1");
}

RunConfig load_run_config(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::map<std::string, std::string> kv = parse_ini(path);
  for (const auto& [key, value] : overrides) kv[key] = value;
  KeyReader r(std::move(kv));
  RunConfig c;

  if (r.has("run.seed")) {
    c.seed = std::uint64_t(r.integer("run.seed", 0));
    c.seed_set = true;
  }
  c.out_dir = r.str("run.out_dir", "");
  c.checkpoint = r.str("run.checkpoint", "");

  c.dataset.root = r.str("dataset.root", "");
  c.dataset.format = r.str("dataset.format", "kitti");
  c.dataset.raw_dir = r.str("dataset.raw_dir", "");
  c.dataset.pose_index = r.str("dataset.pose_index", "");
  c.dataset.spacing = r.num("dataset.spacing", 5.0);
  c.dataset.intensity_scale = r.str("dataset.intensity_scale", "none");
  c.dataset.synthetic_places = int(r.integer("dataset.synthetic_places", 50));
  c.dataset.synthetic_runs = int(r.integer("dataset.synthetic_runs", 2));
  c.dataset.synthetic_noise = r.num("dataset.synthetic_noise", 0.5);
  c.dataset.synthetic_points = int(r.integer("dataset.synthetic_points", 3000));
  c.dataset.split_mode = r.str("dataset.split_mode", "spatial");
  c.dataset.split.buffer_width = r.num("dataset.split_buffer", 10.0);
  for (const std::string& sq : split_list(r.str("dataset.test_squares", ""), ';')) {
    const std::vector<std::string> f = split_list(sq, ',');
    if (f.size() != 2 && f.size() != 3)
      throw config_error("config: test square needs 'northing,easting[,side]'");
    TestSquare t;
    t.center_n = to_double("dataset.test_squares", f[0]);
    t.center_e = to_double("dataset.test_squares", f[1]);
    t.side = f.size() == 3 ? to_double("dataset.test_squares", f[2]) : 100.0;
    c.dataset.split.test_squares.push_back(t);
  }
  c.dataset.test_runs = split_list(r.str("dataset.test_runs", ""), ',');

  const std::string mode = r.str("quantizer.mode", "spherical");
  if (mode == "spherical") {
    c.quant = quant::QuantConfig::spherical_default();
  } else if (mode == "cartesian") {
    c.quant = quant::QuantConfig::cartesian_default();
  } else {
    throw config_error("config: quantizer.mode must be 'spherical' or 'cartesian'");
  }
  c.quant.step[0] = r.num("quantizer.step_1", c.quant.step[0]);
  c.quant.step[1] = r.num("quantizer.step_2", c.quant.step[1]);
  c.quant.step[2] = r.num("quantizer.step_3", c.quant.step[2]);
  c.quant.bound_min[0] = r.num("quantizer.min_1", c.quant.bound_min[0]);
  c.quant.bound_min[1] = r.num("quantizer.min_2", c.quant.bound_min[1]);
  c.quant.bound_min[2] = r.num("quantizer.min_3", c.quant.bound_min[2]);
  c.quant.bound_max[0] = r.num("quantizer.max_1", c.quant.bound_max[0]);
  c.quant.bound_max[1] = r.num("quantizer.max_2", c.quant.bound_max[1]);
  c.quant.bound_max[2] = r.num("quantizer.max_3", c.quant.bound_max[2]);
  c.quant.intensity_enabled = r.boolean("quantizer.intensity", true);
  const std::string dedup = r.str("quantizer.dedup", "random_pick");
  if (dedup == "random_pick") {
    c.quant.dedup = quant::DedupPolicy::random_pick;
  } else if (dedup == "average") {
    c.quant.dedup = quant::DedupPolicy::average;
  } else {
    throw config_error("config: quantizer.dedup must be 'random_pick' or 'average'");
  }

  c.arch.ch0 = int(r.integer("arch.ch0", 32));
  c.arch.ch1 = int(r.integer("arch.ch1", 32));
  c.arch.ch2 = int(r.integer("arch.ch2", 64));
  c.arch.ch3 = int(r.integer("arch.ch3", 64));
  c.arch.fpn = int(r.integer("arch.fpn", 256));
  const std::string merge = r.str("arch.merge", "add");
  if (merge == "add") {
    c.arch.merge = net::Merge::add;
  } else if (merge == "concat") {
    c.arch.merge = net::Merge::concat;
  } else {
    throw config_error("config: arch.merge must be 'add' or 'concat'");
  }
  c.arch.gem_p_init = r.num("arch.gem_p", 3.0);

  c.train.trainer.margin = r.num("trainer.margin", 0.2);
  c.train.trainer.pos_radius = r.num("trainer.pos_radius", 10.0);
  c.train.trainer.neg_radius = r.num("trainer.neg_radius", 50.0);
  c.train.trainer.batch_groups = int(r.integer("trainer.batch_groups", 8));
  c.train.trainer.clouds_per_group = int(r.integer("trainer.clouds_per_group", 2));
  c.train.trainer.epochs = int(r.integer("trainer.epochs", 30));
  c.train.trainer.adam.lr = r.num("trainer.lr", 1e-3);
  c.train.trainer.adam.weight_decay = r.num("trainer.weight_decay", 1e-3);
  c.train.trainer.aug.jitter_sigma = r.num("trainer.jitter_sigma", 0.05);
  c.train.trainer.aug.removal_fraction = r.num("trainer.removal_fraction", 0.10);
  c.train.trainer.aug.translation_range = r.num("trainer.translation_range", 1.0);
  c.train.trainer.aug.flip_prob = r.num("trainer.flip_prob", 0.5);
  c.train.checkpoint_every = int(r.integer("trainer.checkpoint_every", 0));
  c.train.resume = r.str("trainer.resume", "");
  c.train.eval_each_epoch = r.boolean("trainer.eval_each_epoch", true);

  c.eval.recall.threshold_c = r.num("eval.threshold_c", 10.0);
  c.eval.recall.exclude_same_run = r.boolean("eval.exclude_same_run", true);
  c.eval.recall.x_values.clear();
  for (const std::string& x : split_list(r.str("eval.x_values", "1,5,10,25"), ','))
    c.eval.recall.x_values.push_back(int(to_int("eval.x_values", x)));
  c.eval.query_run = r.str("eval.query_run", "");
  c.eval.database = r.str("eval.database", "test");
  c.eval.max_range = r.num("eval.max_range", 100.0);
  c.eval.max_points = int(r.integer("eval.max_points", 0));
  c.eval.write_details = r.boolean("eval.write_details", true);

  c.ablate.axis = r.str("ablate.axis", "");
  for (const std::string& v : split_list(r.str("ablate.values", ""), ',')) {
    if (v == "all")
      c.ablate.values.push_back(0);
    else
      c.ablate.values.push_back(to_double("ablate.values", v));
  }
  c.ablate.train_each = r.boolean("ablate.train_each", false);

  for (const std::string& v : split_list(r.str("bench.points", ""), ',')) {
    if (v == "all")
      c.bench.points.push_back(0);
    else
      c.bench.points.push_back(int(to_int("bench.points", v)));
  }
  c.bench.repeats = int(r.integer("bench.repeats", 20));

  r.reject_unknown();

  // the trainer consumes the run seed and the shared quantizer grid
  c.train.trainer.master_seed = c.seed;
  c.train.trainer.qcfg = c.quant;
  return c;
}

}  // namespace sparseloc::cli
