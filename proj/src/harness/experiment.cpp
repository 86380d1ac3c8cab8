#include "dprune/experiment.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "dprune/csv.hpp"

namespace dprune::harness {

Splits load_splits(const data::DatasetConfig& cfg) {
  return {data::generate_split(cfg, data::Split::kTrain), data::generate_split(cfg, data::Split::kVal)};
}

namespace {

void emit(const Log& log, const std::string& s) {
  if (log) log(s);
}

TrainOptions train_options(const ExperimentConfig& cfg, int epochs, std::uint64_t seed) {
  TrainOptions o;
  o.optimizer = cfg.optimizer;
  o.optimizer.epochs = epochs;
  o.detection = cfg.detection;
  o.ldt = cfg.ldt;
  o.seed = seed;
  return o;
}

std::vector<data::DetectionSample> first_n(const std::vector<data::DetectionSample>& v, int n) {
  return {v.begin(), v.begin() + std::min<std::size_t>(v.size(), static_cast<std::size_t>(n))};
}

}  // namespace

TrainOutcome run_train(const ExperimentConfig& cfg, const Splits& splits, const fs::path& out_dir, const Log& log) {
  cfg.validate();
  fs::create_directories(out_dir);
  TrainOutcome out;
  Checkpoint& ck = out.checkpoint;
  ck.config = cfg;
  ck.model = det::build_model(cfg.model_arch());
  ck.optimizer = fresh_optimizer(ck.model.params);

  CsvWriter metrics(out_dir / "train_metrics.csv", {"epoch", "lr", "det", "ld", "cov", "total", "val_map"});
  CsvWriter spectra(out_dir / "spectra.csv", {"epoch", "scale", "index", "eigenvalue"});
  CsvWriter diag(out_dir / "diagnostics.csv", {"epoch", "scale", "samples", "k", "offdiag_energy", "offdiag_ratio",
                                               "top_mass", "alignment"});
  auto on_epoch = [&](const EpochRecord& r) {
    metrics.row({num(r.epoch), num(r.lr), num(r.det), num(r.ld), num(r.cov), num(r.total), num(r.val_map)});
    std::ostringstream line;
    line << "epoch " << r.epoch << " det " << r.det << " ld " << r.ld << " cov " << r.cov << " val_map " << r.val_map;
    for (std::size_t s = 0; s < r.scales.size(); ++s) {
      const auto& d = r.scales[s];
      diag.row({num(r.epoch), num(static_cast<int>(s)), num(d.samples), num(d.k), num(d.offdiag_energy),
                num(d.offdiag_ratio), num(d.top_mass), num(d.alignment)});
      for (Eigen::Index k = 0; k < d.spectrum.size(); ++k)
        spectra.row({num(r.epoch), num(static_cast<int>(s)), num(static_cast<int>(k)), num(d.spectrum(k))});
    }
    emit(log, line.str());
  };
  out.epochs = train(ck.model, ck.optimizer, splits.train, splits.val, train_options(cfg, cfg.optimizer.epochs, cfg.seed),
                     on_epoch);
  ck.epoch = cfg.optimizer.epochs;
  ck.ldt_trained = cfg.ldt.alpha > 0 || cfg.ldt.beta > 0;
  write_checkpoint(out_dir / "checkpoint.ldtc", ck);
  return out;
}

std::vector<std::vector<double>> method_scores(const det::Model& model, const prune::CouplingGroups& groups,
                                               const ExperimentConfig& cfg,
                                               const std::vector<data::DetectionSample>& images, int round,
                                               prune::ImportanceTable* table_out) {
  std::vector<std::vector<double>> scores;
  for (int c : groups.space_channels) scores.emplace_back(c, 0.0);
  switch (cfg.prune.method) {
    case PruneMethod::kLdt: {
      prune::TraceConfig tc;
      tc.utility.source = cfg.prune.utility;
      tc.utility.detection = cfg.detection;
      tc.importance = {cfg.prune.a, cfg.prune.b, cfg.prune.location};
      tc.ldt = cfg.ldt;
      tc.batch_size = cfg.prune.batch_size;
      auto table = prune::channel_importance(model, images, tc);
      scores = prune::group_scores(groups, table, cfg.prune.sign == SignMode::kSigned);
      if (table_out) *table_out = std::move(table);
      break;
    }
    case PruneMethod::kRandom: {
      std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 0x5EED + static_cast<std::uint64_t>(round));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& s : scores)
        for (auto& v : s) v = u(rng);
      break;
    }
    case PruneMethod::kL1: {
      for (std::size_t k = 0; k < model.graph.convs.size(); ++k) {
        const int s = groups.out_space[k];
        if (s < 0) continue;
        const auto& w = model.params.weights[k];
        const std::size_t per = w.numel() / w.dim(0);
        for (int c = 0; c < w.dim(0); ++c) {
          double l1 = 0;
          for (std::size_t i = 0; i < per; ++i) l1 += std::abs(w[c * per + i]);
          scores[s][c] += l1;
        }
      }
      break;
    }
  }
  return scores;
}

PruneOutcome run_prune(const ExperimentConfig& cfg, const Checkpoint& input, const Splits& splits,
                       const fs::path& out_dir, const Log& log) {
  cfg.validate();
  const auto& pc = cfg.prune;
  if (pc.method == PruneMethod::kLdt && pc.utility == prune::UtilitySource::kNeck && !input.ldt_trained)
    throw std::invalid_argument(
        "run_prune: the neck utility source traces LDT discriminants, but the checkpoint was trained without LDT "
        "(alpha = beta = 0); train with LDT or use --utility det");
  fs::create_directories(out_dir);
  const std::string tag = method_name(pc.method);
  PruneOutcome out;
  out.checkpoint = input;
  out.checkpoint.config = cfg;
  det::Model& model = out.checkpoint.model;
  const int side = cfg.data.image_size;
  const double p0 = static_cast<double>(model.graph.parameter_count());
  const auto trace_images = first_n(splits.train, pc.images);

  CsvWriter rounds(out_dir / ("rounds_" + tag + ".csv"),
                   {"round", "method", "target_rate", "realized_rate", "params", "macs", "map", "note"});
  CsvWriter imp(out_dir / ("importance_" + tag + ".csv"),
                {"round", "layer", "channel", "group", "utility", "importance", "kept"});
  auto record = [&](RoundMetrics m) {
    rounds.row({num(m.round), tag, num(m.target_rate), num(m.realized_rate), num(m.params), num(m.macs), num(m.map),
                m.note});
    std::ostringstream line;
    line << tag << " round " << m.round << " rate " << m.realized_rate << " params " << m.params << " map " << m.map
         << (m.note.empty() ? "" : " (" + m.note + ")");
    emit(log, line.str());
    out.rounds.push_back(std::move(m));
  };

  RoundMetrics r0;
  r0.params = model.graph.parameter_count();
  r0.macs = model.graph.macs(side, side);
  r0.map = evaluate(model, splits.val).map.map;
  record(r0);

  for (int r = 1; r <= pc.rounds; ++r) {
    RoundMetrics m;
    m.round = r;
    m.target_rate = prune::cumulative_rate(pc.target_rate, r, pc.rounds);
    const double current = static_cast<double>(model.graph.parameter_count());
    const double step = 1.0 - (1.0 - m.target_rate) * p0 / current;
    const auto groups = prune::build_coupling_groups(model.graph, prune::default_protected(model.graph));
    prune::PruneMask mask = prune::full_mask(groups);
    if (step > 0) {
      prune::ImportanceTable table;
      const auto scores = method_scores(model, groups, cfg, trace_images, r, &table);
      try {
        mask = prune::select_prune_mask(model.graph, groups, scores, step);
      } catch (const prune::InfeasibleRate& e) {
        m.realized_rate = 1.0 - current / p0;
        m.params = model.graph.parameter_count();
        m.macs = model.graph.macs(side, side);
        m.map = out.rounds.back().map;
        m.note = std::string("stopped: ") + e.what();
        record(m);
        break;
      }
      for (std::size_t l = 0; l < table.layers.size(); ++l) {
        const auto& t = table.layers[l];
        const int s = groups.out_space[t.conv];
        int offset = 0;
        for (int i = 0; i < s; ++i) offset += groups.space_channels[i];
        for (int c = 0; c < t.channels; ++c)
          imp.row({num(r), model.graph.layers[t.layer].name, num(c), num(offset + c), num(table.utility[l][c]),
                   num(table.importance[l][c]), num(static_cast<int>(mask.keep[s][c]))});
      }
      model = prune::apply_prune(model, groups, mask);
    }
    out.checkpoint.prune_history.push_back(mask);
    out.checkpoint.optimizer = fresh_optimizer(model.params);
    if (pc.retrain_epochs > 0) {
      auto opts = train_options(cfg, pc.retrain_epochs, cfg.seed + 1000ULL * r);
      opts.eval_each_epoch = false;
      opts.diag_samples = 0;
      train(model, out.checkpoint.optimizer, splits.train, splits.val, opts);
    }
    m.params = model.graph.parameter_count();
    m.realized_rate = 1.0 - static_cast<double>(m.params) / p0;
    m.macs = model.graph.macs(side, side);
    m.map = evaluate(model, splits.val).map.map;
    record(m);
  }
  out.checkpoint.epoch = input.epoch;
  write_checkpoint(out_dir / ("pruned_" + tag + ".ldtc"), out.checkpoint);
  return out;
}

EvalResult run_eval(const Checkpoint& ck, const std::vector<data::DetectionSample>& split, const fs::path& out_dir) {
  if (split.empty()) throw std::invalid_argument("run_eval: no ground truth (empty split)");
  const EvalResult r = evaluate(ck.model, split);
  fs::create_directories(out_dir);
  nlohmann::json j;
  j["map"] = r.map.map;
  j["params"] = r.params;
  j["macs"] = r.macs;
  j["images"] = split.size();
  nlohmann::json ap = nlohmann::json::array();
  for (double v : r.map.ap) ap.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j["ap"] = ap;
  {
    std::ofstream f(out_dir / "eval.json");
    f << j.dump(2) << "\n";
  }
  CsvWriter csv(out_dir / "eval.csv", {"class", "ap", "gt_count"});
  for (std::size_t k = 0; k < r.map.ap.size(); ++k)
    csv.row({num(static_cast<int>(k)), std::isnan(r.map.ap[k]) ? "" : num(r.map.ap[k]), num(r.map.gt_count[k])});
  return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("pearson: size mismatch");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return sxx == syy && x == y ? 1.0 : 0.0;
  return sxy / std::sqrt(sxx * syy);
}

TraceOutcome run_trace(const ExperimentConfig& cfg, const Checkpoint& ck, const Splits& splits,
                       const fs::path& out_dir) {
  cfg.validate();
  if (cfg.prune.utility == prune::UtilitySource::kNeck && !ck.ldt_trained)
    throw std::invalid_argument("run_trace: the neck utility source needs an LDT-trained checkpoint");
  fs::create_directories(out_dir);
  prune::TraceConfig tc;
  tc.utility.source = cfg.prune.utility;
  tc.utility.detection = cfg.detection;
  tc.importance = {cfg.prune.a, cfg.prune.b, cfg.prune.location};
  tc.ldt = cfg.ldt;
  tc.batch_size = cfg.prune.batch_size;
  TraceOutcome out;
  out.table = prune::channel_importance(ck.model, first_n(splits.train, cfg.prune.images), tc);
  const auto& t = out.table;
  const auto groups = prune::build_coupling_groups(ck.model.graph, prune::default_protected(ck.model.graph));
  CsvWriter imp(out_dir / "importance.csv", {"round", "layer", "channel", "group", "utility", "importance", "kept"});
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    const int s = groups.out_space[t.layers[l].conv];
    int offset = 0;
    for (int i = 0; i < s; ++i) offset += groups.space_channels[i];
    for (int c = 0; c < t.layers[l].channels; ++c)
      imp.row({"0", ck.model.graph.layers[t.layers[l].layer].name, num(c), num(offset + c), num(t.utility[l][c]),
               num(t.importance[l][c]), "1"});
  }
  CsvWriter stab(out_dir / "stability.csv", {"layer", "batch_a", "batch_b", "pearson"});
  // Only full batches take part in the comparison.
  std::vector<std::size_t> full;
  for (std::size_t b = 0; b < t.batch_importance.size(); ++b)
    if (static_cast<int>((b + 1) * cfg.prune.batch_size) <= t.images) full.push_back(b);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    double lo = 1.0;
    for (std::size_t i = 0; i < full.size(); ++i)
      for (std::size_t j = i + 1; j < full.size(); ++j) {
        const double p = pearson(t.batch_importance[full[i]][l], t.batch_importance[full[j]][l]);
        lo = std::min(lo, p);
        stab.row({ck.model.graph.layers[t.layers[l].layer].name, num(static_cast<int>(full[i])),
                  num(static_cast<int>(full[j])), num(p)});
      }
    out.min_correlation.push_back(lo);
  }
  return out;
}

}  // namespace dprune::harness
