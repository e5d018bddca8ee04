#pragma once

// Incremental few-shot protocol: pre-train on the base classes, then learn a
// sequence of few-shot sessions, evaluating on every class seen so far after
// each one. Also the comparison methods, output files and the bound checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Eigenvalues>

#include "imco/data.hpp"
#include "imco/dmf.hpp"
#include "imco/error.hpp"
#include "imco/implanting.hpp"
#include "imco/importance.hpp"
#include "imco/nn.hpp"
#include "imco/random.hpp"

namespace imco {

enum class Method { imco, imco_no_implant, frozen_prototype, naive_finetune };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::imco: return "imco";
    case Method::imco_no_implant: return "imco_no_implant";
    case Method::frozen_prototype: return "frozen_prototype";
    case Method::naive_finetune: return "naive_finetune";
  }
  return "?";
}

inline Method parse_method(const std::string& name) {
  for (Method m : {Method::imco, Method::imco_no_implant, Method::frozen_prototype, Method::naive_finetune})
    if (name == method_name(m)) return m;
  throw ConfigError("unknown method '" + name + "'");
}

inline constexpr Method kAllMethods[] = {Method::naive_finetune, Method::frozen_prototype, Method::imco_no_implant,
                                         Method::imco};

struct RunConfig {
  // dataset: blobs unless a CSV path is given
  std::string dataset_csv;
  int num_classes = 14;
  int feature_dim = 16;
  int samples_per_class = 200;
  double center_scale = 2.0;
  double spread = 1.0;
  double train_fraction = 0.8;

  int base_classes = 6;
  int session_size = 2;
  int shots = 5;

  std::vector<int> hidden = {48, 48, 32};

  // closed-set pre-training
  int pretrain_epochs = 30;
  int batch_size = 32;
  double pretrain_lr = 0.01;
  double momentum = 0.9;

  ImplantConfig implant;
  int head_epochs = 10;
  double head_lr = 0.01;

  DmfConfig dmf;
  double finetune_lr = 0.1;

  double adv_lr = 0.0;  // 0 follows dmf.lr
  int adv_epochs = 1;
  int adv_batch = 0;    // 0 = full batch

  Method method = Method::imco;
  std::uint64_t seed = 1;
  std::string out_dir;

  double ascent_lr() const { return adv_lr > 0.0 ? adv_lr : dmf.lr; }

  void validate() const {
    if (!dataset_csv.empty() && !std::filesystem::exists(dataset_csv))
      throw ConfigError("dataset file " + dataset_csv + " does not exist");
    if (hidden.empty()) throw ConfigError("net.hidden needs at least one layer");
    if (pretrain_epochs < 0 || head_epochs < 0 || implant.episodes < 0) throw ConfigError("negative epoch count");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    implant.mix.validate();
    dmf.validate();
  }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  T out{};
  if (!parse_number(v, out)) throw ConfigError("bad value '" + v + "' for " + key);
  return out;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (auto field : split_fields(v)) out.push_back(parse_value<int>(key, std::string(trim(field))));
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> setters = [] {
    std::map<std::string, Setter> s;
    auto num = [&s](const std::string& key, auto member) {
      s[key] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        using T = std::decay_t<decltype(member(c))>;
        member(c) = parse_value<T>(k, v);
      };
    };
    s["dataset.csv"] = [](RunConfig& c, const std::string&, const std::string& v) { c.dataset_csv = v; };
    num("dataset.classes", [](RunConfig& c) -> int& { return c.num_classes; });
    num("dataset.dim", [](RunConfig& c) -> int& { return c.feature_dim; });
    num("dataset.samples", [](RunConfig& c) -> int& { return c.samples_per_class; });
    num("dataset.center_scale", [](RunConfig& c) -> double& { return c.center_scale; });
    num("dataset.spread", [](RunConfig& c) -> double& { return c.spread; });
    num("dataset.train_fraction", [](RunConfig& c) -> double& { return c.train_fraction; });
    num("schedule.base", [](RunConfig& c) -> int& { return c.base_classes; });
    num("schedule.session_size", [](RunConfig& c) -> int& { return c.session_size; });
    num("schedule.shots", [](RunConfig& c) -> int& { return c.shots; });
    s["net.hidden"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.hidden = parse_int_list(k, v); };
    num("pretrain.epochs", [](RunConfig& c) -> int& { return c.pretrain_epochs; });
    num("pretrain.batch", [](RunConfig& c) -> int& { return c.batch_size; });
    num("pretrain.lr", [](RunConfig& c) -> double& { return c.pretrain_lr; });
    num("pretrain.momentum", [](RunConfig& c) -> double& { return c.momentum; });
    num("implant.episodes", [](RunConfig& c) -> int& { return c.implant.episodes; });
    num("implant.way", [](RunConfig& c) -> int& { return c.implant.way; });
    num("implant.shot", [](RunConfig& c) -> int& { return c.implant.shot; });
    num("implant.query", [](RunConfig& c) -> int& { return c.implant.query; });
    num("implant.beta_a", [](RunConfig& c) -> double& { return c.implant.mix.beta_a; });
    num("implant.beta_b", [](RunConfig& c) -> double& { return c.implant.mix.beta_b; });
    num("implant.cosine_scale", [](RunConfig& c) -> double& { return c.implant.cosine_scale; });
    num("implant.lr", [](RunConfig& c) -> double& { return c.implant.lr; });
    num("implant.momentum", [](RunConfig& c) -> double& { return c.implant.momentum; });
    s["implant.space"] = [](RunConfig& c, const std::string&, const std::string& v) {
      if (v == "input") c.implant.space = MixSpace::input;
      else if (v == "embedding") c.implant.space = MixSpace::embedding;
      else throw ConfigError("implant.space must be input or embedding");
    };
    s["implant.metric"] = [](RunConfig& c, const std::string&, const std::string& v) {
      if (v == "dot") c.implant.metric = PrototypeMetric::dot;
      else if (v == "cosine") c.implant.metric = PrototypeMetric::cosine;
      else throw ConfigError("implant.metric must be dot or cosine");
    };
    s["implant.synthesize"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.implant.synthesize = parse_bool(v);
    };
    num("head.epochs", [](RunConfig& c) -> int& { return c.head_epochs; });
    num("head.lr", [](RunConfig& c) -> double& { return c.head_lr; });
    num("dmf.lr", [](RunConfig& c) -> double& { return c.dmf.lr; });
    num("dmf.max_update", [](RunConfig& c) -> double& { return c.dmf.max_update; });
    num("dmf.r", [](RunConfig& c) -> double& { return c.dmf.base_damping; });
    num("dmf.mu", [](RunConfig& c) -> double& { return c.dmf.error_coeff; });
    num("dmf.alpha_lo", [](RunConfig& c) -> double& { return c.dmf.alpha_lo; });
    num("dmf.alpha_hi", [](RunConfig& c) -> double& { return c.dmf.alpha_hi; });
    num("dmf.top_layers", [](RunConfig& c) -> int& { return c.dmf.tunable_top_layers; });
    num("dmf.iterations", [](RunConfig& c) -> int& { return c.dmf.iterations; });
    s["dmf.adaptive"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.dmf.adaptive_damping = parse_bool(v);
    };
    s["dmf.importance"] = [](RunConfig& c, const std::string&, const std::string& v) {
      if (v == "accumulated") c.dmf.importance = FusionImportance::accumulated;
      else if (v == "uniform") c.dmf.importance = FusionImportance::uniform;
      else throw ConfigError("dmf.importance must be accumulated or uniform");
    };
    num("finetune.lr", [](RunConfig& c) -> double& { return c.finetune_lr; });
    num("importance.lr", [](RunConfig& c) -> double& { return c.adv_lr; });
    num("importance.epochs", [](RunConfig& c) -> int& { return c.adv_epochs; });
    num("importance.batch", [](RunConfig& c) -> int& { return c.adv_batch; });
    s["method"] = [](RunConfig& c, const std::string&, const std::string& v) { c.method = parse_method(v); };
    num("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    s["out"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; };
    return s;
  }();
  return setters;
}

}  // namespace detail

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& setters = detail::config_setters();
  const auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

/// `key = value` lines; `#` starts a comment. Relative dataset paths resolve
/// against the config file's directory.
inline RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {}) {
  RunConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected key = value", line_no);
    const std::string key(detail::trim(body.substr(0, eq)));
    const std::string value(detail::trim(body.substr(eq + 1)));
    try {
      apply_setting(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  if (!cfg.dataset_csv.empty() && std::filesystem::path(cfg.dataset_csv).is_relative() && !base_dir.empty())
    cfg.dataset_csv = (base_dir / cfg.dataset_csv).string();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_run_config(in, path.parent_path());
}

/// One read of a class's training rows.
struct AccessRecord {
  int session = 0;
  int class_id = 0;
};

/// Hands out training rows one session at a time and refuses reads of
/// classes that do not belong to the open session.
class TrainingGate {
 public:
  TrainingGate(const ClassSet& train, SessionSchedule schedule) : train_(train), schedule_(std::move(schedule)) {}

  void open_session(int t) {
    if (t < 0 || static_cast<std::size_t>(t) > schedule_.session_count())
      throw ConfigError("session " + std::to_string(t) + " is not in the schedule");
    session_ = t;
    const auto& ids = schedule_.classes_of(static_cast<std::size_t>(t));
    allowed_ = std::set<int>(ids.begin(), ids.end());
  }

  const Matrix& fetch(int class_id) {
    if (session_ < 0 || !allowed_.count(class_id))
      throw ProtocolError("session " + std::to_string(session_) + " may not read training rows of class " +
                          std::to_string(class_id));
    records_.push_back({session_, class_id});
    return train_.samples(class_id);
  }

  int session() const { return session_; }
  const std::vector<AccessRecord>& records() const { return records_; }

 private:
  const ClassSet& train_;
  SessionSchedule schedule_;
  int session_ = -1;
  std::set<int> allowed_;
  std::vector<AccessRecord> records_;
};

inline constexpr double kUndefinedAccuracy = -1.0;

struct ClassScore {
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct SessionMetrics {
  int session = 0;
  double acc_all = 0.0;
  double acc_base = 0.0;
  double acc_novel = kUndefinedAccuracy;  // undefined before any novel class
  double forgetting = 0.0;                // max earlier acc_base minus current
  double max_disp_ratio = 0.0;
  std::map<int, ClassScore> per_class;
};

/// Scores every test row of the seen classes by argmax over the seen-class
/// logits. `head_classes[j]` is the class id of head row j.
inline SessionMetrics evaluate(const ParameterStore& model, const std::vector<int>& head_classes, const ClassSet& test,
                               const std::vector<int>& seen, const std::vector<int>& base_classes) {
  if (static_cast<Eigen::Index>(head_classes.size()) != model.output_dim())
    throw ConfigError("head class map does not match the head width");
  std::vector<Eigen::Index> columns;
  for (int c : seen) {
    const auto it = std::find(head_classes.begin(), head_classes.end(), c);
    if (it == head_classes.end()) throw ConfigError("class " + std::to_string(c) + " has no head row");
    columns.push_back(it - head_classes.begin());
  }
  const std::set<int> base(base_classes.begin(), base_classes.end());
  SessionMetrics m;
  int hit_all = 0, n_all = 0, hit_base = 0, n_base = 0, hit_novel = 0, n_novel = 0;
  for (std::size_t j = 0; j < seen.size(); ++j) {
    const int c = seen[j];
    const Matrix logits = forward(model, test.samples(c)).logits;
    ClassScore score;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t col = 1; col < columns.size(); ++col)
        if (logits(i, columns[col]) > logits(i, columns[best])) best = col;
      score.correct += best == j;
      ++score.total;
    }
    m.per_class[c] = score;
    hit_all += score.correct;
    n_all += score.total;
    if (base.count(c)) {
      hit_base += score.correct;
      n_base += score.total;
    } else {
      hit_novel += score.correct;
      n_novel += score.total;
    }
  }
  auto ratio = [](int a, int b) { return b ? static_cast<double>(a) / b : kUndefinedAccuracy; };
  m.acc_all = ratio(hit_all, n_all);
  m.acc_base = ratio(hit_base, n_base);
  m.acc_novel = ratio(hit_novel, n_novel);
  return m;
}

struct RunResult {
  RunConfig config;
  SessionSchedule schedule;
  std::vector<SessionMetrics> metrics;
  std::vector<EpisodeLogRow> implant_log;
  std::vector<EpochLogRow> pretrain_log;  // closed-set epochs
  std::vector<EpochLogRow> head_log;
  std::vector<std::vector<DmfLogRow>> session_logs;
  std::vector<ImportanceMatrix> importance;  // S after each session, starting at session 0
  ParameterStore pretrained;
  ParameterStore final_model;
  std::vector<int> head_classes;
  std::vector<AccessRecord> accesses;
  ClassSet test;
};

namespace detail {

inline ClassSet load_or_generate(const RunConfig& cfg) {
  if (!cfg.dataset_csv.empty()) return load_dataset_csv(cfg.dataset_csv);
  return make_blob_classes(cfg.num_classes, cfg.feature_dim, cfg.samples_per_class, cfg.center_scale, cfg.spread,
                           derive_seed(cfg.seed, "data"));
}

inline ImportanceMatrix importance_pass(const ParameterStore& model, const ParameterStore& prev, const Batch& data,
                                        const ImportanceMatrix& accumulated, const RunConfig& cfg) {
  const ParameterStore adv = perturb_adversarially(model, prev, data, cfg.ascent_lr(), cfg.adv_epochs, cfg.adv_batch);
  return accumulate_importance(layer_importance(model, adv), accumulated);
}

}  // namespace detail

/// Full protocol for `cfg.method`. Stages that fail rethrow with the stage named.
inline RunResult run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  RunResult r;
  r.config = cfg;
  std::string stage = "data";
  try {
    const ClassSet data = detail::load_or_generate(cfg);
    data.validate();
    TrainTestSplit split = split_train_test(data, cfg.train_fraction, derive_seed(cfg.seed, "split"));
    r.test = split.test;
    r.schedule = build_schedule(data.class_ids(), cfg.base_classes, cfg.session_size, cfg.shots,
                                derive_seed(cfg.seed, "schedule"));
    TrainingGate gate(split.train, r.schedule);

    stage = "pretrain";
    gate.open_session(0);
    ClassSet base_train;
    base_train.feature_dim = split.train.feature_dim;
    for (int c : r.schedule.base_classes) base_train.classes.emplace(c, gate.fetch(c));
    const std::vector<int>& base_order = r.schedule.base_classes;

    std::vector<int> dims{static_cast<int>(data.feature_dim)};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(static_cast<int>(base_order.size()));
    Rng init_rng(derive_seed(cfg.seed, "init"));
    ParameterStore model = ParameterStore::glorot(dims, init_rng);

    if (cfg.method == Method::imco) {
      r.implant_log = implant_pretrain(model, base_train, cfg.implant, derive_seed(cfg.seed, "implant"));
    } else {
      r.pretrain_log = closed_set_pretrain(model, base_train, base_order, cfg.pretrain_epochs, cfg.batch_size,
                                           cfg.pretrain_lr, cfg.momentum, cfg.seed);
    }
    // Same head construction for every method, so base rows and the
    // prototype rows added later share one scale.
    r.head_log = fit_global_head(model, base_train, base_order, cfg.head_epochs, cfg.batch_size, cfg.head_lr,
                                 cfg.momentum, cfg.seed);
    model.set_all_tunable(true);
    r.pretrained = model;
    r.head_classes = base_order;

    const bool uses_importance = cfg.method == Method::imco || cfg.method == Method::imco_no_implant;
    ImportanceMatrix importance = ImportanceMatrix::zeros_like(model);
    if (uses_importance) {
      stage = "importance (session 0)";
      importance = detail::importance_pass(model, model, stack_classes(base_train, base_order), importance, cfg);
    }
    r.importance.push_back(importance);

    stage = "evaluate (session 0)";
    SessionMetrics m0 = evaluate(model, r.head_classes, r.test, r.schedule.seen_through(0), r.schedule.base_classes);
    r.metrics.push_back(m0);

    Rng shot_rng(derive_seed(cfg.seed, "shots"));
    for (std::size_t t = 1; t <= r.schedule.session_count(); ++t) {
      stage = "session " + std::to_string(t) + " data";
      gate.open_session(static_cast<int>(t));
      const auto& fresh = r.schedule.classes_of(t);
      Batch support;
      support.inputs.resize(static_cast<Eigen::Index>(fresh.size()) * cfg.shots, data.feature_dim);
      Eigen::Index row = 0;
      for (std::size_t j = 0; j < fresh.size(); ++j) {
        const Matrix& pool = gate.fetch(fresh[j]);
        if (pool.rows() < cfg.shots)
          throw SamplingError("class " + std::to_string(fresh[j]) + " has fewer training rows than shots");
        for (std::size_t src : shot_rng.choose(static_cast<std::size_t>(pool.rows()), static_cast<std::size_t>(cfg.shots))) {
          support.inputs.row(row++) = pool.row(static_cast<Eigen::Index>(src));
          support.labels.push_back(static_cast<int>(r.head_classes.size() + j));
        }
      }

      stage = "session " + std::to_string(t) + " adaptation";
      const ParameterStore prev = model;
      double ratio = 0.0;
      switch (cfg.method) {
        case Method::frozen_prototype:
          model = expand_classifier(model, detail::new_class_means(model, support)).model;
          r.session_logs.emplace_back();
          break;
        case Method::naive_finetune: {
          CompressResult cr =
              naive_finetune_adapt(model, support, cfg.finetune_lr, cfg.dmf.iterations, cfg.dmf.tunable_top_layers);
          model = std::move(cr.model);
          r.session_logs.push_back(std::move(cr.log));
          break;
        }
        case Method::imco:
        case Method::imco_no_implant: {
          CompressResult cr = compress_adapt(model, support, importance, cfg.dmf);
          model = std::move(cr.model);
          ratio = cr.report.max_ratio;
          r.session_logs.push_back(std::move(cr.log));
          stage = "session " + std::to_string(t) + " importance";
          importance = detail::importance_pass(model, prev, support, importance, cfg);
          break;
        }
      }
      model.set_all_tunable(true);
      r.head_classes.insert(r.head_classes.end(), fresh.begin(), fresh.end());
      r.importance.push_back(importance);

      stage = "session " + std::to_string(t) + " evaluation";
      SessionMetrics m = evaluate(model, r.head_classes, r.test, r.schedule.seen_through(t), r.schedule.base_classes);
      m.session = static_cast<int>(t);
      double best_base = 0.0;
      for (const auto& earlier : r.metrics) best_base = std::max(best_base, earlier.acc_base);
      m.forgetting = best_base - m.acc_base;
      m.max_disp_ratio = ratio;
      r.metrics.push_back(std::move(m));
    }
    r.final_model = model;
    r.accesses = gate.records();
  } catch (const Error& e) {
    throw Error("stage '" + stage + "' failed: " + e.what());
  }
  return r;
}

/// The comparison methods: closed-set pre-training followed by a prototype
/// head only, plain fine-tuning, or full compressing.
inline RunResult run_baseline(Method kind, RunConfig cfg) {
  if (kind == Method::imco) throw ConfigError("imco is not a baseline");
  cfg.method = kind;
  return run_pipeline(cfg);
}

inline RunResult run_baseline(const std::string& kind, const RunConfig& cfg) {
  return run_baseline(parse_method(kind), cfg);
}

struct ScatterPoint {
  int class_id = 0;
  double x = 0.0;
  double y = 0.0;
};

/// Embeddings of the given classes' rows projected on their two leading
/// principal directions. Each direction's sign is fixed so its largest
/// component is positive.
inline std::vector<ScatterPoint> embedding_scatter(const ParameterStore& model, const ClassSet& data,
                                                   const std::vector<int>& classes) {
  std::vector<int> owner;
  std::vector<Matrix> parts;
  Eigen::Index rows = 0;
  for (int c : classes) {
    parts.push_back(embed(model, data.samples(c)));
    owner.insert(owner.end(), static_cast<std::size_t>(parts.back().rows()), c);
    rows += parts.back().rows();
  }
  if (rows == 0) return {};
  Matrix emb(rows, model.embedding_dim());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    emb.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  const Eigen::RowVectorXd mean = emb.colwise().mean();
  const Matrix centered = emb.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(std::max<Eigen::Index>(1, rows - 1));
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index d = cov.rows();
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(d, 2);
  for (int j = 0; j < 2 && j < d; ++j) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - j);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    basis.col(j) = v;
  }
  const Eigen::MatrixXd proj = centered * basis;
  std::vector<ScatterPoint> out;
  for (Eigen::Index i = 0; i < rows; ++i) out.push_back({owner[static_cast<std::size_t>(i)], proj(i, 0), proj(i, 1)});
  return out;
}

/// Cluster compactness in embedding space: for each class, the mean squared
/// distance of its rows to their centroid divided by the mean squared
/// distance from that centroid to the other centroids, averaged over classes.
/// Scale free; lower is tighter.
inline double separation_ratio(const ParameterStore& model, const ClassSet& data, const std::vector<int>& classes) {
  if (classes.size() < 2) throw ConfigError("separation ratio needs at least two classes");
  std::vector<Vector> centroids;
  std::vector<double> spread;
  for (int c : classes) {
    const Matrix e = embed(model, data.samples(c));
    const Vector mu = e.colwise().mean().transpose();
    spread.push_back((e.rowwise() - mu.transpose()).rowwise().squaredNorm().mean());
    centroids.push_back(mu);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < centroids.size(); ++j)
      if (j != i) d += (centroids[i] - centroids[j]).squaredNorm();
    d /= static_cast<double>(centroids.size() - 1);
    if (d == 0.0) throw ConfigError("separation ratio undefined for coincident centroids");
    total += spread[i] / d;
  }
  return total / static_cast<double>(centroids.size());
}

namespace detail {

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace detail

inline void write_metrics_csv(const std::vector<SessionMetrics>& metrics, const std::filesystem::path& path) {
  auto out = detail::open_output(path);
  out << "session,acc_all,acc_base,acc_novel,forgetting,max_disp_ratio\n";
  for (const auto& m : metrics)
    out << m.session << ',' << detail::fixed6(m.acc_all) << ',' << detail::fixed6(m.acc_base) << ','
        << detail::fixed6(m.acc_novel) << ',' << detail::fixed6(m.forgetting) << ',' << detail::fixed6(m.max_disp_ratio)
        << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::vector<SessionMetrics> load_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<SessionMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_fields(detail::trim(line));
    if (f.size() != 6) throw ParseError("expected 6 metric fields", line_no);
    SessionMetrics m;
    double* dst[] = {&m.acc_all, &m.acc_base, &m.acc_novel, &m.forgetting, &m.max_disp_ratio};
    bool ok = detail::parse_number(f[0], m.session);
    for (std::size_t i = 0; i < 5; ++i) ok = ok && detail::parse_number(f[i + 1], *dst[i]);
    if (!ok) throw ParseError("non-numeric metric", line_no);
    out.push_back(m);
  }
  return out;
}

inline void write_scatter_csv(const std::vector<ScatterPoint>& points, const std::filesystem::path& path) {
  auto out = detail::open_output(path);
  out << "class,x,y\n";
  for (const auto& p : points) out << p.class_id << ',' << detail::fixed6(p.x) << ',' << detail::fixed6(p.y) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

/// Writes metrics.csv, the stage logs, per-session importance dumps and the
/// embedding scatters (after pre-training and at the end) into `dir`.
inline void emit_outputs(const RunResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_metrics_csv(r.metrics, dir / "metrics.csv");

  if (!r.implant_log.empty()) {
    auto out = detail::open_output(dir / "implant_log.csv");
    out << "episode,loss,query_acc\n";
    for (const auto& row : r.implant_log)
      out << row.episode << ',' << detail::fixed6(row.loss) << ',' << detail::fixed6(row.query_acc) << '\n';
  }
  auto write_epochs = [&](const std::vector<EpochLogRow>& rows, const char* name) {
    if (rows.empty()) return;
    auto out = detail::open_output(dir / name);
    out << "epoch,loss,acc\n";
    for (const auto& row : rows)
      out << row.epoch << ',' << detail::fixed6(row.loss) << ',' << detail::fixed6(row.acc) << '\n';
  };
  write_epochs(r.pretrain_log, "pretrain_log.csv");
  write_epochs(r.head_log, "head_log.csv");
  for (std::size_t t = 0; t < r.session_logs.size(); ++t) {
    if (r.session_logs[t].empty()) continue;
    auto out = detail::open_output(dir / ("dmf_log_session" + std::to_string(t + 1) + ".csv"));
    out << "iter,e,alpha,loss,max_displacement_ratio\n";
    for (const auto& row : r.session_logs[t])
      out << row.iter << ',' << detail::fixed6(row.error) << ',' << detail::fixed6(row.alpha) << ','
          << detail::fixed6(row.loss) << ',' << detail::fixed6(row.max_displacement_ratio) << '\n';
  }
  const bool uses_importance = r.config.method == Method::imco || r.config.method == Method::imco_no_implant;
  if (uses_importance)
    for (std::size_t t = 0; t < r.importance.size(); ++t)
      write_importance_csv(r.importance[t], dir / ("importance_session" + std::to_string(t) + ".csv"));

  const auto all_classes = r.schedule.seen_through(r.schedule.session_count());
  write_scatter_csv(embedding_scatter(r.pretrained, r.test, all_classes), dir / "scatter_pretrain.csv");
  write_scatter_csv(embedding_scatter(r.final_model, r.test, all_classes), dir / "scatter_final.csv");
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct AblationRow {
  Method method = Method::imco;
  std::vector<RunResult> runs;  // one per seed
  double acc_all = 0.0;         // medians of final-session values
  double acc_base = 0.0;
  double acc_novel = 0.0;
  double forgetting = 0.0;
  double session0_acc_base = 0.0;
};

/// Runs every method for seeds base_seed .. base_seed+seeds-1 and reports
/// final-session medians. Independent runs execute on up to `workers` threads.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, int seeds, unsigned workers = 0) {
  if (seeds < 1) throw ConfigError("need at least one seed");
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  struct Job {
    std::size_t row;
    RunConfig cfg;
  };
  std::vector<Job> jobs;
  std::vector<AblationRow> rows;
  for (Method m : kAllMethods) {
    rows.push_back({});
    rows.back().method = m;
    for (int s = 0; s < seeds; ++s) {
      RunConfig cfg = base;
      cfg.method = m;
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      jobs.push_back({rows.size() - 1, cfg});
    }
  }
  std::vector<RunResult> results(jobs.size());
  for (std::size_t start = 0; start < jobs.size(); start += workers) {
    std::vector<std::future<RunResult>> batch;
    const std::size_t end = std::min(jobs.size(), start + workers);
    for (std::size_t j = start; j < end; ++j)
      batch.push_back(std::async(std::launch::async, [cfg = jobs[j].cfg] { return run_pipeline(cfg); }));
    for (std::size_t j = start; j < end; ++j) results[j] = batch[j - start].get();
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) rows[jobs[j].row].runs.push_back(std::move(results[j]));
  for (auto& row : rows) {
    std::vector<double> all, base_acc, novel, forget, base0;
    for (const auto& run : row.runs) {
      const auto& last = run.metrics.back();
      all.push_back(last.acc_all);
      base_acc.push_back(last.acc_base);
      novel.push_back(last.acc_novel);
      forget.push_back(last.forgetting);
      base0.push_back(run.metrics.front().acc_base);
    }
    row.acc_all = median(all);
    row.acc_base = median(base_acc);
    row.acc_novel = median(novel);
    row.forgetting = median(forget);
    row.session0_acc_base = median(base0);
  }
  return rows;
}

/// Relative slack for comparing a measured |W - W_init| with its bound:
/// the difference of two O(1) doubles carries rounding error of ~1e-16 per step.
inline constexpr double kBoundRoundingAllowance = 1e-9;

struct BoundCheckSummary {
  double worst_case_displacement = 0.0;  // constant saturated stream, s*alpha = 0.25, max_update = 0.01
  double worst_case_bound = 0.0;
  double random_max_ratio = 0.0;  // over all random streams and bounded parameters
  int random_streams = 0;
  bool passed = false;
};

/// Drives dmf_step with a saturated constant-sign stream and with random
/// streams, checking displacement against the analytic bound.
inline BoundCheckSummary run_bound_checks(std::uint64_t seed, int streams = 1000, int worst_case_iterations = 10000) {
  BoundCheckSummary out;
  {
    ParameterStore w({Layer{Matrix::Zero(1, 1), Vector::Zero(1), true}});
    const ParameterStore w0 = w;
    ImportanceMatrix s = ImportanceMatrix::zeros_like(w);
    s.layers[0].weight(0, 0) = 1.0;
    s.layers[0].bias[0] = 1.0;
    GradientStore g = GradientStore::zeros_like(w);
    g.layers[0].weight(0, 0) = 1.0;
    g.layers[0].bias[0] = 1.0;
    for (int i = 0; i < worst_case_iterations; ++i) dmf_step(w, g, w0, s, 0.25, 1.0, 0.01);
    out.worst_case_displacement = std::abs(w.layer(0).weight(0, 0) - w0.layer(0).weight(0, 0));
    out.worst_case_bound = displacement_bound(1.0, 0.25, 0.01);
  }
  Rng rng(seed);
  out.random_streams = streams;
  for (int k = 0; k < streams; ++k) {
    const int rows = 1 + static_cast<int>(rng.index(4));
    const int cols = 1 + static_cast<int>(rng.index(4));
    ParameterStore w({Layer{Matrix::Zero(rows, cols), Vector::Zero(rows), true}});
    for (Eigen::Index i = 0; i < w.layer(0).weight.size(); ++i) w.layer(0).weight.data()[i] = rng.normal(0, 1);
    const ParameterStore w0 = w;
    ImportanceMatrix s = ImportanceMatrix::zeros_like(w);
    for (Eigen::Index i = 0; i < s.layers[0].weight.size(); ++i) s.layers[0].weight.data()[i] = rng.uniform(0, 1);
    for (Eigen::Index i = 0; i < s.layers[0].bias.size(); ++i) s.layers[0].bias[i] = rng.uniform(0, 1);
    const double alpha = rng.uniform(0.01, 1.0);
    const double max_update = rng.uniform(0.001, 0.1);
    const double lr = rng.uniform(0.01, 1.0);
    const bool constant_sign = k % 2 == 1;
    const int iterations = 1 + static_cast<int>(rng.index(500));
    GradientStore g = GradientStore::zeros_like(w);
    for (int it = 0; it < iterations; ++it) {
      for (Eigen::Index i = 0; i < g.layers[0].weight.size(); ++i) {
        const double v = rng.normal(0, 1);
        g.layers[0].weight.data()[i] = constant_sign ? std::abs(v) * 10 : v;
      }
      for (Eigen::Index i = 0; i < g.layers[0].bias.size(); ++i) g.layers[0].bias[i] = rng.normal(0, 1);
      dmf_step(w, g, w0, s, alpha, lr, max_update);
    }
    out.random_max_ratio = std::max(out.random_max_ratio, displacement_report(w, w0, s, alpha, max_update).max_ratio);
  }
  out.passed = out.worst_case_displacement <= out.worst_case_bound &&
               std::abs(out.worst_case_displacement - out.worst_case_bound) <= 1e-6 && out.random_max_ratio <= 1.0 + kBoundRoundingAllowance;
  return out;
}

}  // namespace imco
