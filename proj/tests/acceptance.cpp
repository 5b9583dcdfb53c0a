// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when a hard criterion fails. Tolerances are fixed below.
//
// Usage: acceptance [criterion-name ...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctxmem/ctxmem.hpp"

#ifndef CTXMEM_CHECKPOINT
#define CTXMEM_CHECKPOINT "tiny_base.ckpt"
#endif

using namespace ctxmem;
namespace fs = std::filesystem;

namespace {

constexpr double kTableTol = 0.01;
constexpr double kLossTol = 1e-9;
constexpr double kGradRelTol = 1e-3;
constexpr double kDeltaTol = 1e-9;
constexpr double kMinRecovery = 0.3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::shared_ptr<TinyTransformer> small_model(std::uint64_t seed, std::size_t window = 256) {
  TransformerConfig c;
  c.context_window = window;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  return TinyTransformer::create_random(c, seed);
}

// ---- recovery arithmetic ----------------------------------------------------

Outcome table_recovery() {
  struct Row {
    const char* task;
    double M, U, L, R;
  };
  // Published M / U / L and the parenthesized recovery of the M row.
  const std::vector<Row> rows = {
      {"nq", 45.2, 53.6, 21.4, 0.74},          {"trec_fine", 59.0, 61.2, 0.2, 0.96},
      {"trec_coarse", 83.4, 79.2, 0.0, 1.05},  {"nlu", 72.7, 78.4, 0.1, 0.93},
      {"counterfact", 66.9, 46.8, 0.3, 1.43},  {"mquake", 95.4, 92.4, 9.6, 1.04},
      {"avg", 70.4, 68.6, 5.3, 1.03},          {"pg19_ppl", 17.9, 14.6, 22.6, 0.59},
  };
  std::string bad;
  for (const auto& r : rows) {
    const auto m = recovery_rate(r.M, r.U, r.L);
    const auto u = recovery_rate(r.U, r.U, r.L);
    const auto l = recovery_rate(r.L, r.U, r.L);
    const bool ok = m && u && l && std::abs(*m - r.R) <= kTableTol && std::abs(*u - 1.0) <= kTableTol &&
                    std::abs(*l) <= kTableTol;
    if (!ok) bad += std::string(" ") + r.task + "=" + (m ? fmt(*m) : "none");
  }
  return {bad.empty(), bad.empty() ? std::to_string(rows.size()) + " rows within " + fmt(kTableTol) : "mismatch:" + bad};
}

// ---- loss oracles -----------------------------------------------------------

using Dist = std::vector<std::vector<double>>;

Dist random_dist(Rng& rng, std::size_t T, std::size_t V) {
  Dist d(T, std::vector<double>(V));
  for (auto& row : d) {
    double s = 0.0;
    for (auto& x : row) {
      x = std::exp(2.0 * (uniform01(rng) - 0.5) * 3.0);
      s += x;
    }
    for (auto& x : row) x /= s;
  }
  return d;
}

Matrix to_matrix(const Dist& d) {
  Matrix m(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(d[0].size()));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d[i][j];
  return m;
}

double oracle_kl(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t v = 0; v < a.size(); ++v)
    if (a[v] > 0.0) s += a[v] * (std::log(a[v]) - std::log(b[v]));
  return s;
}

double oracle_akl_row(const std::vector<double>& p, const std::vector<double>& q, double head_mass) {
  // Head: largest teacher probabilities (lower index first on ties) until the mass reaches head_mass.
  std::vector<std::size_t> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 1; i < idx.size(); ++i)
    for (std::size_t j = i; j > 0 && p[idx[j]] > p[idx[j - 1]]; --j) std::swap(idx[j], idx[j - 1]);
  std::vector<bool> head(p.size(), false);
  double mass = 0.0;
  for (auto v : idx) {
    if (mass >= head_mass) break;
    head[v] = true;
    mass += p[v];
  }
  double gh = 0.0, gt = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) (head[v] ? gh : gt) += std::fabs(p[v] - q[v]);
  const double w = gh + gt > 0.0 ? gh / (gh + gt) : 0.5;
  return w * oracle_kl(p, q) + (1.0 - w) * oracle_kl(q, p);
}

template <typename RowFn>
double oracle_mean(const Dist& p, const Dist& q, const std::vector<bool>& mask, RowFn fn) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (!mask.empty() && !mask[t]) continue;
    s += fn(p[t], q[t]);
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

Outcome loss_oracles() {
  constexpr int kCases = 50;
  Rng rng(20240601);
  double worst = 0.0;
  std::size_t failures = 0, checks = 0;
  auto check = [&](double got, double want) {
    const double err = std::fabs(got - want);
    worst = std::max(worst, err);
    ++checks;
    if (!(err <= kLossTol) || got < 0.0) ++failures;
  };
  for (int c = 0; c < kCases; ++c) {
    const std::size_t T = 1 + uniform_index(rng, 6), V = 2 + uniform_index(rng, 9);
    const Dist p = random_dist(rng, T, V), q = random_dist(rng, T, V);
    std::vector<bool> mask;
    if (c % 2) {
      mask.resize(T);
      for (std::size_t t = 0; t < T; ++t) mask[t] = uniform01(rng) < 0.7;
    }
    const Matrix P = to_matrix(p), Q = to_matrix(q);
    const double head_mass = 0.1 + 0.8 * uniform01(rng);
    check(loss_fkl(P, Q, mask), oracle_mean(p, q, mask, [](auto& a, auto& b) { return oracle_kl(a, b); }));
    check(loss_rkl(P, Q, mask), oracle_mean(p, q, mask, [](auto& a, auto& b) { return oracle_kl(b, a); }));
    check(loss_akl(P, Q, mask, head_mass),
          oracle_mean(p, q, mask, [&](auto& a, auto& b) { return oracle_akl_row(a, b, head_mass); }));
    check(loss_dpkd(P, Q, mask), oracle_mean(p, q, mask, [](auto& a, auto& b) { return oracle_kl(b, a); }));

    // MSE on unnormalized hidden-like values.
    Dist h1(T, std::vector<double>(V)), h2(T, std::vector<double>(V));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t v = 0; v < V; ++v) {
        h1[t][v] = 4.0 * (uniform01(rng) - 0.5);
        h2[t][v] = 4.0 * (uniform01(rng) - 0.5);
      }
    check(loss_mse(to_matrix(h1), to_matrix(h2), mask), oracle_mean(h1, h2, mask, [](auto& a, auto& b) {
            double s = 0.0;
            for (std::size_t v = 0; v < a.size(); ++v) s += (a[v] - b[v]) * (a[v] - b[v]);
            return s / static_cast<double>(a.size());
          }));

    // SeqKD: student log-probabilities of the sampled response tokens.
    std::vector<double> lp(T);
    for (std::size_t t = 0; t < T; ++t) lp[t] = std::log(q[t][uniform_index(rng, V)]);
    double want = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < T; ++t)
      if (mask.empty() || mask[t]) {
        want -= lp[t];
        ++n;
      }
    check(loss_seqkd(lp, mask), n ? want / static_cast<double>(n) : 0.0);

    // Zero exactly on equal distributions, positive otherwise.
    const bool differ = p != q;
    ++checks;
    if (loss_fkl(P, P) != 0.0 || loss_rkl(Q, Q) != 0.0 || (differ && !(loss_fkl(P, Q) > 0.0 && loss_rkl(P, Q) > 0.0)))
      ++failures;
  }
  return {failures == 0, std::to_string(checks) + " checks over " + std::to_string(kCases) +
                             " cases per loss, max abs err " + fmt(worst, 3) +
                             (failures ? ", " + std::to_string(failures) + " failed" : "")};
}

// ---- adapter gradient checks ------------------------------------------------

Outcome gradient_checks() {
  auto model = small_model(17, 64);
  AdapterSpec spec;
  spec.targets = {"wq", "wk", "wv", "wo", "w1", "w2"};
  spec.dropout = 0.0;
  AdapterState adapter = model->init_adapter(spec, 5);
  Rng rng(99);
  for (auto& [_, f] : adapter.factors) f.b = random_normal(f.b.rows(), f.b.cols(), 0.1, rng);

  const Context ctx = Context::from_text("g", "the pet of bako is zumi.");
  const std::string question = "what is the pet of bako?";
  const TokenSequence response = model->vocabulary().encode(" zumi");
  TokenSequence resp = response;
  resp.push_back(Vocabulary::kEos);
  const TokenSequence tp = teacher_prefix(ctx, question), sp = student_prefix(question);
  TokenSequence input{Vocabulary::kBos};
  input.insert(input.end(), sp.begin(), sp.end());
  input.insert(input.end(), resp.begin(), resp.end() - 1);
  const std::size_t first = sp.size();
  const std::size_t layer = model->hidden_layers();

  TeacherTargets targets;
  targets.response = resp;
  targets.log_probs = target_log_probs(*model, nullptr, tp, resp);
  targets.hidden = hidden_at(*model, nullptr, tp, resp, layer).states;

  std::vector<std::pair<Matrix*, std::pair<std::string, bool>>> slots;
  for (auto& [key, f] : adapter.factors) {
    slots.push_back({&f.a, {key, true}});
    slots.push_back({&f.b, {key, false}});
  }

  std::string detail;
  bool all_ok = true;
  for (LossKind kind : {LossKind::fkl, LossKind::rkl, LossKind::akl, LossKind::mse, LossKind::seqkd}) {
    const bool mse = kind == LossKind::mse;
    auto value = [&](const AdapterState& a) {
      const Matrix logits = model->logits(&a, input, first);
      Matrix hidden;
      if (mse) hidden = model->hidden(&a, input, layer, first);
      return response_loss_sum(kind, targets, logits, mse ? &hidden : nullptr, 0.5, 1.0, nullptr);
    };
    AdapterGradients grads = zero_gradients(adapter);
    model->accumulate_adapter_gradient(adapter, input, first, mse ? std::optional<std::size_t>(layer) : std::nullopt,
                                       make_loss_head(kind, targets, 0.5, 1.0), nullptr, grads);
    constexpr int kCoords = 24;
    double worst = 0.0;
    Rng pick(derive_seed(7, loss_kind_name(kind)));
    for (int c = 0; c < kCoords; ++c) {
      auto& [mat, id] = slots[uniform_index(pick, slots.size())];
      const auto i = static_cast<Eigen::Index>(uniform_index(pick, static_cast<std::size_t>(mat->size())));
      const Matrix& g = id.second ? grads.at(id.first).a : grads.at(id.first).b;
      const double old = mat->data()[i], h = 1e-5;
      mat->data()[i] = old + h;
      const double up = value(adapter);
      mat->data()[i] = old - h;
      const double down = value(adapter);
      mat->data()[i] = old;
      const double num = (up - down) / (2 * h), ana = g.data()[i];
      // Relative error with a floor for coordinates whose gradient vanishes.
      const double rel = std::fabs(num - ana) / std::max({std::fabs(num), std::fabs(ana), 1e-7});
      worst = std::max(worst, rel);
    }
    const bool ok = worst <= kGradRelTol;
    all_ok = all_ok && ok;
    detail += std::string(loss_kind_name(kind)) + " " + fmt(worst, 2) + (ok ? "" : "!") + "; ";
  }
  return {all_ok, "worst relative error over 24 coords: " + detail};
}

// ---- selection --------------------------------------------------------------

/// Logits depend on the token, its position and whether the marker token
/// appears earlier in the input, so teacher and student disagree.
class RiggedModel final : public LanguageModel {
 public:
  explicit RiggedModel(TokenId marker) : marker_(marker) {}
  std::string identifier() const override { return "rigged"; }
  const Vocabulary& vocabulary() const override { return Vocabulary::reference(); }
  std::size_t context_window() const override { return 512; }
  std::size_t hidden_dim() const override { return 1; }
  std::string fingerprint() const override { return "rigged"; }

  static double logit(TokenId prev, std::size_t pos, bool marked, TokenId v) {
    return std::sin(0.37 * v + 1.3 * prev + 0.11 * static_cast<double>(pos)) * 2.0 +
           (marked ? 1.5 * std::cos(0.05 * v * v) : 0.0);
  }

  Matrix logits(const AdapterState*, std::span<const TokenId> input, std::size_t first_row) const override {
    const auto V = static_cast<Eigen::Index>(vocab_size());
    Matrix out(static_cast<Eigen::Index>(input.size() - first_row), V);
    bool marked = false;
    for (std::size_t t = 0; t < input.size(); ++t) {
      marked = marked || input[t] == marker_;
      if (t < first_row) continue;
      for (Eigen::Index v = 0; v < V; ++v)
        out(static_cast<Eigen::Index>(t - first_row), v) = logit(input[t], t, marked, static_cast<TokenId>(v));
    }
    return out;
  }

 private:
  TokenId marker_;
};

double oracle_logprob_sum(const RiggedModel&, TokenId marker, std::size_t V, const TokenSequence& prefix,
                          const TokenSequence& response) {
  std::vector<TokenId> seq{Vocabulary::kBos};
  seq.insert(seq.end(), prefix.begin(), prefix.end());
  seq.insert(seq.end(), response.begin(), response.end());
  double total = 0.0;
  for (std::size_t j = 0; j < response.size(); ++j) {
    const std::size_t pos = prefix.size() + j;  // position of the token preceding response[j]
    bool marked = false;
    for (std::size_t t = 0; t <= pos; ++t) marked = marked || seq[t] == marker;
    double mx = -1e300;
    std::vector<double> z(V);
    for (std::size_t v = 0; v < V; ++v) {
      z[v] = RiggedModel::logit(seq[pos], pos, marked, static_cast<TokenId>(v));
      mx = std::max(mx, z[v]);
    }
    double s = 0.0;
    for (double x : z) s += std::exp(x - mx);
    total += z[static_cast<std::size_t>(response[j])] - mx - std::log(s);
  }
  return total;
}

std::vector<std::size_t> oracle_top_k(const std::vector<ScoredEntry>& scored, std::size_t k) {
  // Exhaustive: rank every entry by (excluded, -score, index) and keep the first k.
  std::vector<std::tuple<int, double, std::size_t>> keys;
  for (std::size_t i = 0; i < scored.size(); ++i)
    keys.emplace_back(scored[i].excluded ? 1 : 0, -scored[i].delta_ppl, i);
  std::sort(keys.begin(), keys.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(k, keys.size()); ++i) out.push_back(std::get<2>(keys[i]));
  std::sort(out.begin(), out.end());
  return out;
}

Outcome selection_oracle() {
  constexpr std::size_t kEntries = 1000;
  Rng rng(4242);
  std::size_t mismatches = 0, runs = 0;
  // Tie configurations: all distinct, a handful of distinct values, all equal,
  // ties straddling the cut, and distinct scores with excluded entries mixed in.
  const std::vector<std::string> configs = {"distinct", "few_values", "all_equal", "tie_at_cut", "excluded"};
  for (const auto& config : configs) {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t k = 1 + uniform_index(rng, kEntries);
      std::vector<ScoredEntry> scored(kEntries);
      for (std::size_t i = 0; i < kEntries; ++i) {
        double s = 0.0;
        if (config == "distinct" || config == "excluded") s = 10.0 * (uniform01(rng) - 0.5);
        else if (config == "few_values") s = static_cast<double>(uniform_index(rng, 4));
        else if (config == "tie_at_cut") s = i < k ? static_cast<double>(uniform_index(rng, 2)) : 1.0;
        scored[i].delta_ppl = s;
        scored[i].excluded = config == "excluded" && uniform01(rng) < 0.2;
      }
      if (config == "tie_at_cut")
        for (std::size_t i = kEntries; i > 1; --i) std::swap(scored[i - 1], scored[uniform_index(rng, i)]);
      SelectionConfig cfg;
      cfg.k = k;
      cfg.strategy = SelectionStrategy::ppl;
      ++runs;
      if (select_indices(scored, cfg) != oracle_top_k(scored, k)) ++mismatches;
    }
  }

  // Delta on rigged models against the sum-of-logs oracle.
  const Vocabulary& vocab = Vocabulary::reference();
  const std::string ctx_text = "the pet of bako is zumi. the boss of lira is dovo.";
  const Context ctx = Context::from_text("rig", ctx_text);
  const TokenId marker = vocab.encode(" bako").front();
  RiggedModel model(marker);
  double worst = 0.0;
  for (int i = 0; i < 40; ++i) {
    TransferEntry e;
    e.kind = i % 4 == 3 ? EntryKind::open : EntryKind::qa;
    if (e.kind == EntryKind::qa) e.query = i % 2 ? "what is the pet of bako?" : "who is the boss of lira?";
    for (std::size_t t = 0, n = 1 + uniform_index(rng, 8); t < n; ++t)
      e.response.push_back(static_cast<TokenId>(3 + uniform_index(rng, vocab.size() - 3)));
    const ScoredEntry s = ppl_discrepancy({&model, nullptr}, {&model, nullptr}, ctx, e);
    const TokenSequence tp = teacher_prefix(ctx, e.kind == EntryKind::qa ? e.query : std::string());
    const TokenSequence sp = student_prefix(e.kind == EntryKind::qa ? e.query : std::string());
    const double want = oracle_logprob_sum(model, marker, vocab.size(), tp, e.response) -
                        oracle_logprob_sum(model, marker, vocab.size(), sp, e.response);
    worst = std::max(worst, std::fabs(s.delta_ppl - want));
  }
  const bool ok = mismatches == 0 && worst <= kDeltaTol;
  return {ok, std::to_string(runs - mismatches) + "/" + std::to_string(runs) +
                  " top-k runs match the sort oracle; delta max abs err " + fmt(worst, 3)};
}

// ---- early stopping -----------------------------------------------------------

TransferSet tiny_transfer_set(const Vocabulary& vocab) {
  TransferSet set;
  set.context_id = "es";
  set.context_text = "the pet of bako is zumi.";
  const char* qs[] = {"what is the pet of bako?", "who is the pet of bako?", "tell me the pet of bako.",
                      "recall the pet of bako.", "what is bako's pet?", "the pet of bako is?"};
  for (const char* q : qs) {
    TransferEntry e;
    e.query = q;
    e.response = vocab.encode(" zumi");
    e.response.push_back(Vocabulary::kEos);
    set.entries.push_back(e);
  }
  return set;
}

Outcome early_stopping() {
  auto model = small_model(23, 128);
  const Context ctx = Context::from_text("es", "the pet of bako is zumi.");
  const TransferSet set = tiny_transfer_set(model->vocabulary());
  ConsolidationConfig base;
  base.learning_rate = 1e-2;
  base.batch_size = 2;
  base.adapter.dropout = 0.0;
  base.seed = 3;
  base.patience = 2;
  base.max_epochs = 12;

  Rng rng(777);
  std::size_t wrong = 0;
  for (int s = 0; s < 100; ++s) {
    std::vector<double> seq(base.max_epochs + 1);
    for (auto& v : seq) v = static_cast<double>(uniform_index(rng, s % 3 == 0 ? 3 : 8)) + (s % 5 == 0 ? 0.0 : uniform01(rng));
    // Oracle: patience-2 rule over epochs 1..max; epoch 0 only reports.
    std::size_t stop = base.max_epochs, best = 0, misses = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t e = 1; e <= base.max_epochs; ++e) {
      if (seq[e] < best_loss) {
        best_loss = seq[e];
        best = e;
        misses = 0;
      } else if (++misses == 2) {
        stop = e;
        break;
      }
    }
    ConsolidationConfig cfg = base;
    cfg.scripted_dev_loss = [&](std::size_t e) { return seq[e]; };
    const ConsolidationResult r = consolidate(*model, nullptr, ctx, set, cfg);
    // Reference state: train exactly `best` epochs with no stopping.
    ConsolidationConfig ref_cfg = base;
    ref_cfg.max_epochs = best;
    ref_cfg.scripted_dev_loss = [](std::size_t e) { return -static_cast<double>(e); };
    const ConsolidationResult ref = consolidate(*model, nullptr, ctx, set, ref_cfg);
    bool same = r.adapter.factors.size() == ref.adapter.factors.size();
    for (const auto& [k, f] : r.adapter.factors)
      same = same && f.a == ref.adapter.factors.at(k).a && f.b == ref.adapter.factors.at(k).b;
    const bool stopped = stop < base.max_epochs || misses == 2;
    if (r.record.epochs_run != stop || r.record.best_epoch != best || r.record.stopped_early != stopped || !same) {
      ++wrong;
      if (wrong <= 3)
        std::cerr << "  sequence " << s << ": ran " << r.record.epochs_run << " (want " << stop << "), best "
                  << r.record.best_epoch << " (want " << best << "), state " << (same ? "ok" : "differs") << "\n";
    }
  }
  return {wrong == 0, std::to_string(100 - wrong) + "/100 scripted sequences stop and restore as expected"};
}

// ---- end-to-end ---------------------------------------------------------------

PretrainConfig base_pretrain_config() {
  PretrainConfig c;
  c.model.context_window = 512;
  c.model.d_model = 64;
  c.model.n_heads = 4;
  c.model.n_layers = 2;
  c.model.d_ff = 256;
  c.steps = 8000;
  c.batch = 8;
  c.learning_rate = 2e-3;
  c.seed = 1;
  c.max_facts = 4;
  c.max_queries = 8;
  c.icl_fraction = 0.3;
  c.context_weight = 0.0;
  c.recap_fraction = 0.3;
  c.repeat_fraction = 0.2;
  c.repeat_warmup_steps = 3000;
  return c;
}

std::string pretrain_key(const PretrainConfig& c) {
  nlohmann::json j = {{"model", c.model},       {"steps", c.steps},         {"batch", c.batch},
                      {"lr", c.learning_rate},  {"warmup", c.warmup},       {"min_lr_ratio", c.min_lr_ratio},
                      {"clip", c.clip_norm},    {"seed", c.seed},           {"facts", c.max_facts},
                      {"queries", c.max_queries}, {"icl", c.icl_fraction},  {"icl_classes", c.max_icl_classes},
                      {"icl_shots", c.max_icl_shots}, {"context_weight", c.context_weight},
                      {"recap", c.recap_fraction}, {"repeat", c.repeat_fraction},
                      {"repeat_warmup", c.repeat_warmup_steps}};
  return j.dump();
}

/// Pretrained base model, cached next to the build.
std::shared_ptr<const TinyTransformer> base_model() {
  static std::shared_ptr<const TinyTransformer> cached;
  if (cached) return cached;
  const PretrainConfig cfg = base_pretrain_config();
  const fs::path ckpt = CTXMEM_CHECKPOINT, key_file = fs::path(CTXMEM_CHECKPOINT).concat(".key");
  const std::string key = pretrain_key(cfg);
  if (fs::exists(ckpt) && fs::exists(key_file)) {
    std::ifstream in(key_file);
    std::string stored((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (stored == key) return cached = TinyTransformer::load(ckpt);
  }
  std::cerr << "  pretraining base model (" << cfg.steps << " steps) into " << ckpt.string() << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  auto model = pretrain(cfg);
  std::cerr << "  pretraining took " << fmt(seconds_since(t0), 4) << " s\n";
  fs::create_directories(ckpt.parent_path().empty() ? fs::path(".") : ckpt.parent_path());
  model->save(ckpt);
  std::ofstream(key_file) << key;
  return cached = model;
}

StreamConfig e2e_config(std::uint64_t seed) {
  StreamConfig c;
  c.chunk_length = 0;
  c.retention_ratio = 0.0;
  auto& p = c.pipeline;
  p.elicitation.n_qa = 48;
  p.elicitation.n_open = 16;
  p.elicitation.entry_length = 8;
  p.elicitation.queries_per_prompt = 20;
  p.elicitation.seed = derive_seed(seed, "elicit");
  p.selection.k = 48;
  p.selection.seed = derive_seed(seed, "select");
  p.consolidation.learning_rate = 3e-3;
  p.consolidation.max_epochs = 20;
  p.consolidation.batch_size = 8;
  p.consolidation.seed = derive_seed(seed, "consolidate");
  return c;
}

struct E2eTask {
  std::string name;
  std::function<TaskInstance(std::uint64_t)> make;
};

const std::vector<E2eTask>& e2e_tasks() {
  static const std::vector<E2eTask> tasks = {
      {"fact_recall", [](std::uint64_t s) { return gen_fact_recall(s, 4, 4); }},
      {"manyshot_icl", [](std::uint64_t s) { return gen_manyshot_icl(s, 2, 12, 8); }},
  };
  return tasks;
}

constexpr std::uint64_t kSeeds[] = {11, 12, 13, 14, 15};

Outcome end_to_end() {
  auto model = base_model();
  std::string detail;
  bool ok = true;
  for (const auto& task : e2e_tasks()) {
    double M = 0, U = 0, L = 0;
    std::string per_seed;
    for (auto seed : kSeeds) {
      const TaskInstance inst = task.make(seed);
      const double u = run_condition(*model, inst, {Condition::full_context, std::nullopt}).score;
      const double l = run_condition(*model, inst, {Condition::no_context, std::nullopt}).score;
      const double m = run_consolidated(model, inst, e2e_config(seed)).score;
      U += u;
      L += l;
      M += m;
      per_seed += " " + fmt(m, 2) + "/" + fmt(u, 2) + "/" + fmt(l, 2);
    }
    const double n = static_cast<double>(std::size(kSeeds));
    M /= n;
    U /= n;
    L /= n;
    const auto R = recovery_rate(M, U, L);
    const bool task_ok = U > L && M > L && R && *R >= kMinRecovery;
    ok = ok && task_ok;
    detail += task.name + ": M " + fmt(M, 3) + " U " + fmt(U, 3) + " L " + fmt(L, 3) + " R " +
              (R ? fmt(*R, 3) : "n/a") + (task_ok ? "" : "!") + " [M/U/L per seed" + per_seed + "]; ";
  }
  const std::size_t params = model->params().parameter_count();
  if (params > 5'000'000) {
    ok = false;
    detail += "model has " + std::to_string(params) + " parameters; ";
  }
  return {ok, detail};
}

Outcome selection_ablation() {
  auto model = base_model();
  std::string detail;
  bool ok = true;
  for (const auto& task : e2e_tasks()) {
    double ppl = 0, rnd = 0;
    std::string per_seed;
    for (auto seed : kSeeds) {
      const TaskInstance inst = task.make(seed);
      StreamConfig cfg = e2e_config(seed);
      const std::size_t total = cfg.pipeline.elicitation.n_qa + cfg.pipeline.elicitation.n_open;
      cfg.pipeline.selection.k = total / 2;
      const double a = run_consolidated(model, inst, cfg).score;
      cfg.pipeline.selection.strategy = SelectionStrategy::random;
      const double b = run_consolidated(model, inst, cfg).score;
      ppl += a;
      rnd += b;
      per_seed += " " + fmt(a, 2) + "/" + fmt(b, 2);
    }
    const double n = static_cast<double>(std::size(kSeeds));
    ok = ok && ppl / n >= rnd / n;
    detail += task.name + ": ppl " + fmt(ppl / n, 3) + " random " + fmt(rnd / n, 3) + " [per seed" + per_seed + "]; ";
  }
  return {ok, detail};
}

// ---- streaming ----------------------------------------------------------------

StreamConfig stream_config(std::size_t chunk) {
  StreamConfig c;
  c.chunk_length = chunk;
  c.retention_ratio = 0.1;
  auto& p = c.pipeline;
  p.elicitation.n_qa = 4;
  p.elicitation.n_open = 2;
  p.elicitation.entry_length = 4;
  p.elicitation.seed = 8;
  p.selection.k = 5;
  p.consolidation.max_epochs = 1;
  p.consolidation.learning_rate = 1e-3;
  p.consolidation.seed = 9;
  return c;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome streaming_invariants() {
  auto model = small_model(31, 256);
  const Vocabulary& vocab = model->vocabulary();
  const Context corpus = Context::from_text("corpus", synthetic_corpus(5, 400));
  Rng rng(2718);
  std::size_t bad_turns = 0, runs = 0;
  std::map<std::size_t, std::vector<std::size_t>> peaks;  // chunk length -> peaks over all |c|
  for (int i = 0; i < 12; ++i) {
    const std::size_t chunk = 40 + 20 * uniform_index(rng, 3);
    const std::size_t n = 1 + uniform_index(rng, std::min<std::size_t>(corpus.size(), 6 * chunk));
    const Context c = corpus.slice(0, n, "fuzz" + std::to_string(i), vocab);
    const StreamState st = sequential_transform(model, c, stream_config(chunk));
    ++runs;
    if (st.turn != (n + chunk - 1) / chunk || st.turns.size() != st.turn) ++bad_turns;
    peaks[chunk].push_back(st.peak_context_tokens);
  }
  // Peak prompt size for a fixed chunk length must not grow with |c|: long
  // contexts stay within the bound set by the largest single-chunk prompt.
  bool peak_ok = true;
  std::string peak_detail;
  for (std::size_t chunk : {40, 60, 80}) {
    const StreamConfig cfg = stream_config(chunk);
    std::size_t single = 0;
    for (std::size_t b = 0; b + chunk <= corpus.size(); b += chunk) {
      const Context one = corpus.slice(b, b + chunk, "one", vocab);
      const TransferSet t = build_transfer_set(*model, one, streaming::turn_config(cfg.pipeline, b / chunk).elicitation);
      single = std::max({single, t.max_prompt_tokens, one.size()});
    }
    const StreamState long_run = sequential_transform(model, corpus, cfg);
    peak_ok = peak_ok && long_run.peak_context_tokens <= single && long_run.peak_context_tokens < corpus.size();
    for (auto p : peaks[chunk]) peak_ok = peak_ok && p <= single;
    peak_detail += std::to_string(chunk) + ":" + std::to_string(long_run.peak_context_tokens) + "<=" +
                   std::to_string(single) + " ";
  }

  // Identical seeds give identical bytes.
  const fs::path dir = fs::temp_directory_path() / "ctxmem_acceptance_stream";
  fs::remove_all(dir);
  const Context c = corpus.slice(0, 150, "det", vocab);
  const StreamState a = sequential_transform(model, c, stream_config(50), dir / "a");
  const StreamState b = sequential_transform(model, c, stream_config(50), dir / "b");
  save_adapter(dir / "a.final", *a.adapter);
  save_adapter(dir / "b.final", *b.adapter);
  bool same = file_bytes(dir / "a.final") == file_bytes(dir / "b.final");
  for (const auto& t : a.turns) same = same && file_bytes(dir / "a" / t.checkpoint_file) == file_bytes(dir / "b" / t.checkpoint_file);
  fs::remove_all(dir);

  const bool ok = bad_turns == 0 && peak_ok && same;
  return {ok, std::to_string(runs - bad_turns) + "/" + std::to_string(runs) + " fuzzed turn counts; peaks " +
                  peak_detail + "; checkpoints " + (same ? "bitwise identical" : "differ")};
}

// ---- retention ----------------------------------------------------------------

Outcome retention_protocol() {
  std::vector<std::pair<std::string, std::shared_ptr<const LanguageModel>>> models = {
      {"random", small_model(41, 2048)}};
  if (fs::exists(CTXMEM_CHECKPOINT)) models.push_back({"pretrained", base_model()});
  const std::string corpus = synthetic_corpus(3, 400);
  std::size_t pairings = 0, mismatched = 0;
  for (const auto& [name, model] : models) {
    const std::vector<TaskInstance> tasks = {
        gen_fact_recall(1, 6, 4), gen_manyshot_icl(2, 3, 10, 4), gen_knowledge_update(3, 4, 2),
        gen_multiple_choice(4, 5, 4), gen_text_generation(corpus, 5, text_slice_lengths(model->context_window()))};
    for (const auto& task : tasks) {
      const ConditionResult full = run_condition(*model, task, {Condition::full_context, std::nullopt});
      const ConditionResult local = run_condition(*model, task, {Condition::local_context, 1.0});
      ++pairings;
      const bool same = (full.score == local.score || (std::isnan(full.score) && std::isnan(local.score))) &&
                        full.predictions == local.predictions && full.exceeds_window == local.exceeds_window;
      if (!same) {
        ++mismatched;
        std::cerr << "  " << name << "/" << task.id << ": full " << full.score << " local " << local.score << "\n";
      }
    }
  }

  Rng rng(1618);
  const Vocabulary& vocab = Vocabulary::reference();
  const TokenId tok = vocab.encode(" bako").front();
  std::size_t wrong = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = uniform_index(rng, 3000);
    double rho = uniform01(rng);
    if (i % 10 == 0) rho = static_cast<double>(uniform_index(rng, 5)) / 4.0;  // include 0, 1 and exact halves
    const Context c{"fuzz", TokenSequence(n, tok), ""};
    const std::size_t want = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n) + 0.5));
    if (retained_suffix(c, rho, vocab).size() != want) ++wrong;
  }
  const bool ok = mismatched == 0 && wrong == 0;
  return {ok, std::to_string(pairings - mismatched) + "/" + std::to_string(pairings) +
                  " task/model pairings equal at rho=1; " + std::to_string(1000 - wrong) +
                  "/1000 suffix lengths equal round(rho*n)"};
}

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
  bool soft = false;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {"recovery_arithmetic", table_recovery},
      {"loss_oracles", loss_oracles},
      {"gradient_checks", gradient_checks},
      {"selection_oracle", selection_oracle},
      {"early_stopping", early_stopping},
      {"end_to_end", end_to_end},
      {"selection_ablation", selection_ablation, true},
      {"streaming_invariants", streaming_invariants},
      {"retention_protocol", retention_protocol},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  warning_sink() = [](std::string_view) {};
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const char* tag = o.pass ? "PASS" : (c.soft ? "FAIL (soft)" : "FAIL");
    std::cout << tag << " " << c.name << " [" << fmt(seconds_since(t0), 3) << " s]: " << o.detail << std::endl;
    if (!o.pass && !c.soft) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
