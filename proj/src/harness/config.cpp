#include "dprune/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include <json.hpp>

namespace dprune::harness {

using nlohmann::json;

namespace {

template <typename E>
using Names = std::vector<std::pair<E, const char*>>;

const Names<det::ClsNormalization> kClsNorm{{det::ClsNormalization::kMean, "mean"},
                                            {det::ClsNormalization::kPositives, "positives"}};
const Names<ldt::CovReduction> kCovReduction{{ldt::CovReduction::kSum, "sum"}, {ldt::CovReduction::kMean, "mean"}};
const Names<ldt::AssignmentMode> kAssignment{{ldt::AssignmentMode::kDetector, "detector"},
                                             {ldt::AssignmentMode::kAllScales, "all_scales"}};
const Names<ldt::KNormalization> kKNorm{{ldt::KNormalization::kPerScale, "per_scale"},
                                        {ldt::KNormalization::kGlobal, "global"}};
const Names<ldt::WithinNormalization> kWithin{{ldt::WithinNormalization::kPerClass, "per_class"},
                                              {ldt::WithinNormalization::kUnweighted, "unweighted"}};
const Names<prune::UtilitySource> kUtility{{prune::UtilitySource::kNeck, "neck"}, {prune::UtilitySource::kDet, "det"}};
const Names<SignMode> kSign{{SignMode::kAbs, "abs"}, {SignMode::kSigned, "signed"}};
const Names<PruneMethod> kMethod{{PruneMethod::kLdt, "ldt"}, {PruneMethod::kRandom, "random"}, {PruneMethod::kL1, "l1"}};

template <typename E>
const char* name_of(const Names<E>& names, E v) {
  for (const auto& [e, n] : names)
    if (e == v) return n;
  throw std::logic_error("config: enum value without a name");
}

// Reads keys of one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + where() + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::vector<int>>) {
        if (!v.is_array()) throw ConfigError("");
        for (const auto& e : v)
          if (!e.is_number_integer()) throw ConfigError("");
      } else {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config: '" + where(key) + "' has the wrong type");
    }
  }

  template <typename E>
  void get_enum(const char* key, const Names<E>& names, E& out) {
    std::string s = name_of(names, out);
    get(key, s);
    for (const auto& [e, n] : names)
      if (s == n) {
        out = e;
        return;
      }
    std::string allowed;
    for (const auto& [e, n] : names) allowed += std::string(allowed.empty() ? "" : ", ") + n;
    throw ConfigError("config: '" + where(key) + "' must be one of {" + allowed + "}, got '" + s + "'");
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + where(k) + "'");
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  const auto& d = c.data;
  j["data"] = {{"image_size", d.image_size},
               {"num_classes", d.num_classes},
               {"min_objects", d.min_objects},
               {"max_objects", d.max_objects},
               {"min_object_size", d.min_object_size},
               {"max_object_size", d.max_object_size},
               {"min_box_side", d.min_box_side},
               {"noise", d.noise},
               {"max_overlap_iou", d.max_overlap_iou},
               {"n_train", d.n_train},
               {"n_val", d.n_val},
               {"seed", d.seed}};
  const auto& a = c.arch;
  j["arch"] = {{"backbone_widths", a.backbone_widths},
               {"neck_channels", a.neck_channels},
               {"num_scales", a.num_scales},
               {"head_convs", a.head_convs}};
  const auto& o = c.optimizer;
  j["optimizer"] = {{"lr", o.lr},
                    {"momentum", o.momentum},
                    {"weight_decay", o.weight_decay},
                    {"batch_size", o.batch_size},
                    {"epochs", o.epochs},
                    {"grad_clip", o.grad_clip},
                    {"class_balanced", o.class_balanced}};
  const auto& dl = c.detection;
  j["detection"] = {{"range_multiplier", dl.assignment.range_multiplier},
                    {"box_weight", dl.box_weight},
                    {"cls_norm", name_of(kClsNorm, dl.cls_norm)}};
  const auto& l = c.ldt;
  j["ldt"] = {{"alpha", l.alpha},
              {"beta", l.beta},
              {"phi", l.phi},
              {"eps_reg", l.eps_reg},
              {"shrink", l.shrink},
              {"standardize", l.standardize},
              {"cov_reduction", name_of(kCovReduction, l.cov_reduction)},
              {"assignment", name_of(kAssignment, l.assignment)},
              {"k_norm", name_of(kKNorm, l.k_norm)},
              {"within_norm", name_of(kWithin, l.within_norm)}};
  const auto& p = c.prune;
  j["prune"] = {{"target_rate", p.target_rate},
                {"rounds", p.rounds},
                {"retrain_epochs", p.retrain_epochs},
                {"images", p.images},
                {"a", p.a},
                {"b", p.b},
                {"utility", name_of(kUtility, p.utility)},
                {"location", p.location},
                {"sign", name_of(kSign, p.sign)},
                {"method", name_of(kMethod, p.method)},
                {"batch_size", p.batch_size}};
  return j;
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("config: " + msg);
}

}  // namespace

const char* method_name(PruneMethod m) { return name_of(kMethod, m); }

void PruneConfig::validate() const {
  check(target_rate >= 0 && target_rate < 1, "prune.target_rate must be in [0, 1)");
  check(rounds >= 1, "prune.rounds must be >= 1");
  check(retrain_epochs >= 0, "prune.retrain_epochs must be >= 0");
  check(images >= 1, "prune.images must be >= 1");
  check(a > 0, "prune.a must be > 0");
  check(b > 0, "prune.b must be > 0");
  check(batch_size >= 1, "prune.batch_size must be >= 1");
}

void ExperimentConfig::validate() const {
  check(!out_dir.empty(), "out_dir must not be empty");
  try {
    data.validate();
    model_arch().validate();
    optimizer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  check(arch.num_classes == data.num_classes, "arch class count must equal data.num_classes");
  check(detection.assignment.range_multiplier > 0, "detection.range_multiplier must be > 0");
  check(detection.box_weight >= 0, "detection.box_weight must be >= 0");
  check(ldt.alpha >= 0, "ldt.alpha must be >= 0");
  check(ldt.beta >= 0, "ldt.beta must be >= 0");
  check(ldt.phi >= 0 && ldt.phi <= 1, "ldt.phi must be in [0, 1]");
  check(ldt.eps_reg > 0, "ldt.eps_reg must be > 0");
  check(ldt.shrink >= 0, "ldt.shrink must be >= 0");
  prune.validate();
}

det::ArchConfig ExperimentConfig::model_arch() const {
  det::ArchConfig a = arch;
  a.num_classes = data.num_classes;
  a.seed = seed;
  return a;
}

std::string render_config(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  ExperimentConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);
  {
    auto s = root.sub("data");
    auto& d = c.data;
    s.get("image_size", d.image_size);
    s.get("num_classes", d.num_classes);
    s.get("min_objects", d.min_objects);
    s.get("max_objects", d.max_objects);
    s.get("min_object_size", d.min_object_size);
    s.get("max_object_size", d.max_object_size);
    s.get("min_box_side", d.min_box_side);
    s.get("noise", d.noise);
    s.get("max_overlap_iou", d.max_overlap_iou);
    s.get("n_train", d.n_train);
    s.get("n_val", d.n_val);
    s.get("seed", d.seed);
    s.finish();
  }
  {
    auto s = root.sub("arch");
    auto& a = c.arch;
    s.get("backbone_widths", a.backbone_widths);
    s.get("neck_channels", a.neck_channels);
    s.get("num_scales", a.num_scales);
    s.get("head_convs", a.head_convs);
    s.finish();
  }
  {
    auto s = root.sub("optimizer");
    auto& o = c.optimizer;
    s.get("lr", o.lr);
    s.get("momentum", o.momentum);
    s.get("weight_decay", o.weight_decay);
    s.get("batch_size", o.batch_size);
    s.get("epochs", o.epochs);
    s.get("grad_clip", o.grad_clip);
    s.get("class_balanced", o.class_balanced);
    s.finish();
  }
  {
    auto s = root.sub("detection");
    auto& d = c.detection;
    s.get("range_multiplier", d.assignment.range_multiplier);
    s.get("box_weight", d.box_weight);
    s.get_enum("cls_norm", kClsNorm, d.cls_norm);
    s.finish();
  }
  {
    auto s = root.sub("ldt");
    auto& l = c.ldt;
    s.get("alpha", l.alpha);
    s.get("beta", l.beta);
    s.get("phi", l.phi);
    s.get("eps_reg", l.eps_reg);
    s.get("shrink", l.shrink);
    s.get("standardize", l.standardize);
    s.get_enum("cov_reduction", kCovReduction, l.cov_reduction);
    s.get_enum("assignment", kAssignment, l.assignment);
    s.get_enum("k_norm", kKNorm, l.k_norm);
    s.get_enum("within_norm", kWithin, l.within_norm);
    s.finish();
  }
  {
    auto s = root.sub("prune");
    auto& p = c.prune;
    s.get("target_rate", p.target_rate);
    s.get("rounds", p.rounds);
    s.get("retrain_epochs", p.retrain_epochs);
    s.get("images", p.images);
    s.get("a", p.a);
    s.get("b", p.b);
    s.get_enum("utility", kUtility, p.utility);
    s.get("location", p.location);
    s.get_enum("sign", kSign, p.sign);
    s.get_enum("method", kMethod, p.method);
    s.get("batch_size", p.batch_size);
    s.finish();
  }
  root.finish();
  c.arch.num_classes = c.data.num_classes;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dprune::harness
