#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "imco/harness.hpp"
#include "oracles.hpp"

using namespace imco;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

Outcome gradient_exactness() {
  Rng rng(derive_seed(101, "gradient"));
  double worst = 0.0;
  for (int n = 0; n < 100; ++n) {
    const ParameterStore m = oracle::random_model(rng, 2 + static_cast<int>(rng.index(3)), 7);
    const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng.index(6));
    const Matrix x = oracle::random_matrix(rng, rows, m.input_dim());
    const Labels y = oracle::random_labels(rng, static_cast<std::size_t>(rows), static_cast<std::size_t>(m.output_dim()));
    const GradientStore analytic = backward(m, Batch{x, y}).gradient;
    const GradientStore numeric = oracle::finite_difference_extended(
        m, [&](const ParameterStore& p) { return oracle::mean_cross_entropy_extended(p, x, y); });
    worst = std::max(worst, oracle::max_relative_error(analytic, numeric));
  }
  return {worst < 1e-4, fmt("max relative error %.3g over 100 nets", worst)};
}

Outcome displacement_bound_check() {
  const BoundCheckSummary s = run_bound_checks(derive_seed(102, "bound"), 1000, 10000);
  return {s.passed, fmt("worst case |W-W_init| %.12f vs bound %.12f; random max ratio %.15f over %d streams",
                        s.worst_case_displacement, s.worst_case_bound, s.random_max_ratio, s.random_streams)};
}

ImportanceMatrix random_importance(Rng& rng, const ParameterStore& m, double lo, double hi) {
  ImportanceMatrix s = ImportanceMatrix::zeros_like(m);
  for (auto& b : s.layers)
    for (std::size_t i = 0; i < b.size(); ++i) b.at(i) = rng.uniform(lo, hi);
  return s;
}

GradientStore random_gradient(Rng& rng, const ParameterStore& m) {
  GradientStore g = GradientStore::zeros_like(m);
  for (auto& b : g.layers)
    for (std::size_t i = 0; i < b.size(); ++i) b.at(i) = rng.normal(0.0, 2.0);
  return g;
}

Outcome dmf_degeneracies() {
  Rng rng(derive_seed(103, "degenerate"));
  double sgd_gap = 0.0;
  int pinned_violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const ParameterStore init = oracle::random_model(rng, 3, 6);
    const ImportanceMatrix s = random_importance(rng, init, 0.0, 1.0);
    const double lr = rng.uniform(0.01, 1.0), cap = rng.uniform(1e-3, 0.1);
    ParameterStore fused = init, sgd = init;
    for (int it = 0; it < 50; ++it) {
      const GradientStore g = random_gradient(rng, init);
      dmf_step(fused, g, init, s, 0.0, lr, cap);
      GradientStore u = g;
      for (auto& b : u.layers)
        for (std::size_t i = 0; i < b.size(); ++i) b.at(i) = oracle::clip(lr * b.at(i), cap);
      sgd_step(sgd, u, 1.0);
      for (std::size_t k = 0; k < init.layer_count(); ++k) {
        sgd_gap = std::max(sgd_gap, (fused.layer(k).weight - sgd.layer(k).weight).cwiseAbs().maxCoeff());
        sgd_gap = std::max(sgd_gap, (fused.layer(k).bias - sgd.layer(k).bias).cwiseAbs().maxCoeff());
      }
    }
    ImportanceMatrix mixed = s;
    for (auto& b : mixed.layers)
      for (std::size_t i = 0; i < b.size(); ++i)
        if (rng.uniform(0.0, 1.0) < 0.5) b.at(i) = 1.0;
    ParameterStore pinned = init;
    for (int it = 0; it < 50; ++it) {
      dmf_step(pinned, random_gradient(rng, init), init, mixed, 1.0, lr, cap);
      for (std::size_t k = 0; k < init.layer_count(); ++k)
        for (std::size_t i = 0; i < mixed.layers[k].size(); ++i)
          if (mixed.layers[k].at(i) == 1.0 && pinned.layer(k).at(i) != init.layer(k).at(i)) ++pinned_violations;
    }
  }
  return {sgd_gap <= 1e-12 && pinned_violations == 0,
          fmt("alpha=0 max gap to clipped SGD %.3g; s*alpha=1 entries off W_init: %d", sgd_gap, pinned_violations)};
}

Outcome recursion_identity() {
  Rng rng(derive_seed(104, "recursion"));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const ParameterStore init = oracle::random_model(rng, 2, 5);
    const ImportanceMatrix s = random_importance(rng, init, 0.0, 1.0);
    const double alpha = rng.uniform(0.0, 1.0), lr = rng.uniform(0.01, 1.0), cap = rng.uniform(1e-3, 0.2);
    const int n = 1 + static_cast<int>(rng.index(50));
    ParameterStore w = init;
    std::vector<std::vector<std::vector<double>>> updates(init.layer_count());
    for (std::size_t k = 0; k < init.layer_count(); ++k) updates[k].resize(init.layer(k).size());
    for (int it = 0; it < n; ++it) {
      const GradientStore g = random_gradient(rng, init);
      for (std::size_t k = 0; k < init.layer_count(); ++k)
        for (std::size_t i = 0; i < g.layers[k].size(); ++i) updates[k][i].push_back(oracle::clip(lr * g.layers[k].at(i), cap));
      dmf_step(w, g, init, s, alpha, lr, cap);
    }
    for (std::size_t k = 0; k < init.layer_count(); ++k)
      for (std::size_t i = 0; i < init.layer(k).size(); ++i) {
        const double closed = oracle::unrolled_fusion(init.layer(k).at(i), updates[k][i], s.layers[k].at(i) * alpha);
        worst = std::max(worst, std::abs(closed - w.layer(k).at(i)));
      }
  }
  return {worst <= 1e-10, fmt("max |unrolled - iterated| %.3g over 100 runs, n <= 50", worst)};
}

Outcome importance_laws() {
  Rng rng(derive_seed(105, "importance"));
  int range = 0, monotone = 0, absorbing = 0, normalization = 0;
  for (int trial = 0; trial < 30; ++trial) {
    ParameterStore model = oracle::random_model(rng, 3, 6);
    ImportanceMatrix acc = ImportanceMatrix::zeros_like(model);
    for (int task = 0; task < 10; ++task) {
      const ParameterStore prev = model;
      if (task > 0 && rng.uniform(0.0, 1.0) < 0.5)
        model.append_head_rows(oracle::random_matrix(rng, 1, model.embedding_dim()), Vector::Zero(1));
      const Eigen::Index rows = 4;
      const Batch b{oracle::random_matrix(rng, rows, model.input_dim()),
                    oracle::random_labels(rng, rows, static_cast<std::size_t>(model.output_dim()))};
      const double step = rng.uniform(0.0, 1.0) < 0.1 ? 0.0 : rng.uniform(1e-3, 0.5);
      const ImportanceMatrix cur = layer_importance(model, perturb_adversarially(model, prev, b, step, 1));
      for (const auto& l : cur.layers) {
        double mx = 0.0;
        for (std::size_t i = 0; i < l.size(); ++i) mx = std::max(mx, l.at(i));
        if (mx != 1.0 && mx != 0.0) ++normalization;
      }
      const ImportanceMatrix padded = acc.extended_to(model);
      const ImportanceMatrix next = accumulate_importance(cur, acc);
      for (std::size_t k = 0; k < next.layers.size(); ++k)
        for (std::size_t i = 0; i < next.layers[k].size(); ++i) {
          const double before = padded.layers[k].at(i), after = next.layers[k].at(i);
          if (after < 0.0 || after > 1.0) ++range;
          if (after < before) ++monotone;
          if (before == 1.0 && after != 1.0) ++absorbing;
        }
      acc = next;
      // drift the model so later tasks see new weights
      for (std::size_t k = 0; k < model.layer_count(); ++k)
        model.layer(k).weight += oracle::random_matrix(rng, model.layer(k).out_dim(), model.layer(k).in_dim(), 0.05);
    }
  }
  return {range + monotone + absorbing + normalization == 0,
          fmt("violations: range %d, monotone %d, absorbing %d, layer max %d", range, monotone, absorbing, normalization)};
}

Outcome mixup_laws() {
  Rng rng(derive_seed(106, "mixup"));
  int outside = 0, identity = 0;
  for (int n = 0; n < 10000; ++n) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.index(16));
    Vector a(d), b(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      a[j] = rng.normal(0.0, 3.0);
      b[j] = rng.normal(0.0, 3.0);
    }
    const double lambda = rng.uniform(0.0, 1.0);
    const Vector m = mix_features(a, b, lambda);
    for (Eigen::Index j = 0; j < d; ++j)
      if (m[j] < std::min(a[j], b[j]) || m[j] > std::max(a[j], b[j])) ++outside;
    if (mix_features(a, b, 1.0) != a) ++identity;
  }
  const MixSpec spec;
  double sum = 0.0;
  for (int n = 0; n < 10000; ++n) sum += sample_mix_ratio(spec, rng);
  const double mean = sum / 10000.0;
  return {outside == 0 && identity == 0 && mean >= 0.49 && mean <= 0.51,
          fmt("betweenness violations %d, lambda=1 mismatches %d, Beta(1.5,1.5) mean %.4f", outside, identity, mean)};
}

std::map<Method, const AblationRow*> by_method(const std::vector<AblationRow>& rows) {
  std::map<Method, const AblationRow*> out;
  for (const auto& r : rows) out[r.method] = &r;
  return out;
}

Outcome ablation_ordering(const std::vector<AblationRow>& rows, double seconds) {
  auto m = by_method(rows);
  const double naive = m[Method::naive_finetune]->acc_all, frozen = m[Method::frozen_prototype]->acc_all;
  const double no_impl = m[Method::imco_no_implant]->acc_all, full = m[Method::imco]->acc_all;
  const bool c1 = naive < frozen, c2 = frozen <= no_impl, c3 = no_impl < full;
  const bool c4 = m[Method::imco]->forgetting < m[Method::naive_finetune]->forgetting;
  return {c1 && c2 && c3 && c4 && seconds < 600.0,
          fmt("acc_all naive %.4f %s frozen %.4f %s no_implant %.4f %s imco %.4f; forgetting imco %.4f %s naive %.4f",
              naive, c1 ? "<" : "!<", frozen, c2 ? "<=" : "!<=", no_impl, c3 ? "<" : "!<", full,
              m[Method::imco]->forgetting, c4 ? "<" : "!<", m[Method::naive_finetune]->forgetting)};
}

Outcome forgetting_demo(const std::vector<AblationRow>& rows) {
  const AblationRow& naive = *by_method(rows)[Method::naive_finetune];
  return {naive.acc_base < 0.5 * naive.session0_acc_base,
          fmt("naive_finetune acc_base final %.4f vs session 0 %.4f", naive.acc_base, naive.session0_acc_base)};
}

Outcome protocol_integrity(const std::vector<AblationRow>& rows) {
  std::size_t reads = 0, illegal = 0;
  for (const auto& row : rows)
    for (const auto& run : row.runs)
      for (const AccessRecord& a : run.accesses) {
        ++reads;
        const auto& allowed = run.schedule.classes_of(static_cast<std::size_t>(a.session));
        if (std::find(allowed.begin(), allowed.end(), a.class_id) == allowed.end()) ++illegal;
      }
  // the gate itself must refuse a prior-session read
  const RunConfig cfg;
  const ClassSet data = make_blob_classes(cfg.num_classes, cfg.feature_dim, 10, 1.0, 1.0, 1);
  const SessionSchedule sched = build_schedule(data.class_ids(), cfg.base_classes, cfg.session_size, cfg.shots, 1);
  TrainingGate gate(data, sched);
  gate.open_session(0);
  gate.fetch(sched.base_classes.front());
  gate.open_session(1);
  bool refused = false;
  try {
    gate.fetch(sched.base_classes.front());
  } catch (const ProtocolError&) {
    refused = true;
  }
  return {illegal == 0 && reads > 0 && refused,
          fmt("%zu gated reads across all ablation runs, %zu outside the open session; prior-session read %s", reads,
              illegal, refused ? "refused" : "ALLOWED")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome reproducibility() {
  const fs::path dir = fs::temp_directory_path() / "imco_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunConfig cfg;
  cfg.seed = 7;
  write_metrics_csv(run_pipeline(cfg).metrics, dir / "a.csv");
  write_metrics_csv(run_pipeline(cfg).metrics, dir / "b.csv");
  const std::string a = slurp(dir / "a.csv"), b = slurp(dir / "b.csv");
  fs::remove_all(dir);
  return {!a.empty() && a == b, fmt("metrics CSVs %s (%zu bytes)", a == b ? "byte-identical" : "DIFFER", a.size())};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  int failures = 0;
  auto report = [&](int id, const Outcome& o, double seconds, double limit) {
    const bool pass = o.pass && (limit <= 0.0 || seconds < limit);
    failures += !pass;
    std::printf("CRITERION %2d %s  %s [%.2f s]\n", id, pass ? "PASS" : "FAIL", o.detail.c_str(), seconds);
    std::fflush(stdout);
  };
  auto timed = [&](int id, double limit, const std::function<Outcome()>& f) {
    const auto t0 = clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(id, o, std::chrono::duration<double>(clock::now() - t0).count(), limit);
  };

  timed(1, 30.0, gradient_exactness);
  timed(2, 60.0, displacement_bound_check);
  timed(3, 0.0, dmf_degeneracies);
  timed(4, 0.0, recursion_identity);
  timed(5, 0.0, importance_laws);
  timed(6, 0.0, mixup_laws);

  const auto t0 = clock::now();
  std::vector<AblationRow> rows;
  std::string ablation_error;
  try {
    RunConfig cfg;
    cfg.seed = 1;
    rows = run_ablation(cfg, 5);
  } catch (const std::exception& e) {
    ablation_error = e.what();
  }
  const double ablation_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  if (ablation_error.empty()) {
    report(7, ablation_ordering(rows, ablation_seconds), ablation_seconds, 600.0);
    timed(8, 0.0, [&] { return forgetting_demo(rows); });
    timed(9, 0.0, [&] { return protocol_integrity(rows); });
  } else {
    for (int id : {7, 8, 9}) report(id, {false, "ablation threw: " + ablation_error}, ablation_seconds, 0.0);
  }
  timed(10, 0.0, reproducibility);

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
