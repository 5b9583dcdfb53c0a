#include <gtest/gtest.h>

#include <set>

#include "ctxmem/consolidation.hpp"
#include "test_support.hpp"

using namespace ctxmem;

namespace {

const Context kCtx = Context::from_text("ctx",
                                        "the pet of bako is zumi.\nthe home of dira is lufe.\n"
                                        "the boss of kemo is tavi.\n");

TransferSet small_set(const AdaptableModel& m, std::size_t n_qa = 6, std::size_t n_open = 4) {
  ElicitationConfig e;
  e.n_qa = n_qa;
  e.n_open = n_open;
  e.entry_length = 6;
  e.seed = 2;
  return build_transfer_set(m, kCtx, e);
}

ConsolidationConfig quick(LossKind loss = LossKind::fkl) {
  ConsolidationConfig c;
  c.loss = loss;
  c.learning_rate = 1e-2;
  c.max_epochs = 3;
  c.batch_size = 4;
  c.seed = 1;
  c.adapter.dropout = 0.0;
  return c;
}

}  // namespace

TEST(Split, SizesFollowRatioAndPartition) {
  for (std::size_t n : {5u, 7u, 10u, 200u}) {
    auto s = split_train_dev(n, 4, 1, 9);
    const auto want = static_cast<std::size_t>(std::llround(n / 5.0));
    EXPECT_EQ(s.dev.size(), std::max<std::size_t>(1, want));
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.dev.begin(), s.dev.end());
    EXPECT_EQ(all.size(), n);
    EXPECT_TRUE(std::is_sorted(s.train.begin(), s.train.end()));
  }
  EXPECT_EQ(split_train_dev(20, 4, 1, 9).dev, split_train_dev(20, 4, 1, 9).dev);
  EXPECT_NE(split_train_dev(50, 4, 1, 9).dev, split_train_dev(50, 4, 1, 10).dev);
  EXPECT_THROW(split_train_dev(4, 4, 1, 0), ConfigError);
  EXPECT_THROW(split_train_dev(10, 0, 1, 0), ConfigError);
}

TEST(EarlyStoppingRule, StopsAfterPatienceMisses) {
  EarlyStopping s(2);
  EXPECT_FALSE(s.observe(1, 1.0));
  EXPECT_FALSE(s.observe(2, 0.9));
  EXPECT_FALSE(s.observe(3, 0.9));  // equal is not an improvement
  EXPECT_TRUE(s.observe(4, 0.95));
  EXPECT_EQ(s.best_epoch(), 2u);
  EXPECT_DOUBLE_EQ(s.best_loss(), 0.9);
  EXPECT_THROW(EarlyStopping(0), ConfigError);
}

TEST(EarlyStoppingRule, ImprovementResetsCounter) {
  EarlyStopping s(2);
  s.observe(1, 1.0);
  EXPECT_FALSE(s.observe(2, 1.1));
  EXPECT_FALSE(s.observe(3, 0.5));
  EXPECT_FALSE(s.observe(4, 0.6));
  EXPECT_TRUE(s.observe(5, 0.7));
  EXPECT_EQ(s.best_epoch(), 3u);
}

TEST(Consolidation, ScriptedDevLossSelectsBestEpoch) {
  auto m = ctxmem::testing::small_tiny_model();
  auto set = small_set(*m);
  auto cfg = quick();
  cfg.max_epochs = 10;
  const std::vector<double> script{9, 5, 4, 4.5, 4.2, 1};
  cfg.scripted_dev_loss = [&](std::size_t e) { return script.at(e); };
  auto r = consolidate(*m, nullptr, kCtx, set, cfg);
  EXPECT_EQ(r.record.epochs_run, 4u);
  EXPECT_TRUE(r.record.stopped_early);
  EXPECT_EQ(r.record.best_epoch, 2u);
  EXPECT_EQ(r.record.dev_loss, (std::vector<double>{5, 4, 4.5, 4.2}));
  EXPECT_EQ(r.record.initial_dev_loss, 9.0);
  EXPECT_EQ(r.record.optimizer, "adam");
}

TEST(Consolidation, TrainingLowersDevLossAndIsDeterministic) {
  auto m = ctxmem::testing::small_tiny_model();
  auto set = small_set(*m);
  // SeqKD targets sampled from a random teacher share nothing a held-out
  // entry could benefit from; it is covered by SeqKdLearnsSharedResponses.
  for (auto loss : {LossKind::fkl, LossKind::rkl, LossKind::akl, LossKind::dpkd, LossKind::mse}) {
    auto cfg = quick(loss);
    auto r = consolidate(*m, nullptr, kCtx, set, cfg);
    ASSERT_GE(r.record.dev_loss.size(), 1u) << loss_kind_name(loss);
    const double best = *std::min_element(r.record.dev_loss.begin(), r.record.dev_loss.end());
    EXPECT_LT(best, r.record.initial_dev_loss) << loss_kind_name(loss);
    EXPECT_EQ(r.record.train_size + r.record.dev_size, set.entries.size());
    auto again = consolidate(*m, nullptr, kCtx, set, cfg);
    EXPECT_EQ(again.adapter, r.adapter) << loss_kind_name(loss);
  }
}

TEST(Consolidation, SeqKdLearnsSharedResponses) {
  auto m = ctxmem::testing::small_tiny_model();
  auto set = small_set(*m);
  for (auto& e : set.entries) {
    e.response = Vocabulary::reference().encode(" bako is zumi.");
    e.response.push_back(Vocabulary::kEos);
  }
  auto cfg = quick(LossKind::seqkd);
  auto r = consolidate(*m, nullptr, kCtx, set, cfg);
  const double best = *std::min_element(r.record.dev_loss.begin(), r.record.dev_loss.end());
  EXPECT_LT(best, r.record.initial_dev_loss);
  EXPECT_EQ(consolidate(*m, nullptr, kCtx, set, cfg).adapter, r.adapter);
}

TEST(Consolidation, ZeroEpochsReturnsStartingAdapter) {
  auto m = ctxmem::testing::small_tiny_model();
  auto set = small_set(*m);
  auto cfg = quick();
  cfg.max_epochs = 0;
  auto r = consolidate(*m, nullptr, kCtx, set, cfg);
  EXPECT_EQ(r.adapter, m->init_adapter(cfg.adapter, derive_seed(cfg.seed, "adapter")));
  EXPECT_EQ(r.record.epochs_run, 0u);
}

TEST(Consolidation, PriorAdapterIsContinued) {
  auto m = ctxmem::testing::small_tiny_model();
  auto set = small_set(*m);
  auto cfg = quick();
  auto first = consolidate(*m, nullptr, kCtx, set, cfg);
  cfg.max_epochs = 0;
  auto second = consolidate(*m, &first.adapter, kCtx, set, cfg);
  EXPECT_EQ(second.adapter, first.adapter);
}

TEST(Consolidation, RejectsBadInputs) {
  auto m = ctxmem::testing::small_tiny_model(64);
  auto set = small_set(*m);
  auto cfg = quick();
  TransferSet empty = set;
  empty.entries.clear();
  EXPECT_THROW(consolidate(*m, nullptr, kCtx, empty, cfg), ConfigError);
  TransferSet four = set;
  four.entries.resize(4);
  EXPECT_THROW(consolidate(*m, nullptr, kCtx, four, cfg), ConfigError);
  Context longer = Context::from_text("long", std::string(80, 'x'));
  EXPECT_THROW(consolidate(*m, nullptr, longer, set, cfg), WindowOverflow);
  cfg.mse_layer = 9;
  cfg.loss = LossKind::mse;
  EXPECT_THROW(consolidate(*m, nullptr, kCtx, set, cfg), ConfigError);
  ConsolidationConfig bad;
  bad.optimizer = "lion";
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Consolidation, ConfigJsonRoundTrip) {
  auto c = quick(LossKind::akl);
  c.mse_layer = 1;
  nlohmann::json j = c;
  auto back = j.get<ConsolidationConfig>();
  EXPECT_EQ(back.loss, LossKind::akl);
  EXPECT_EQ(back.mse_layer, std::optional<std::size_t>(1));
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Consolidation, ContextLmBaselineFitsTheContext) {
  auto m = ctxmem::testing::small_tiny_model();
  auto cfg = quick();
  cfg.max_epochs = 20;
  cfg.patience = 20;
  auto r = context_lm_baseline(*m, kCtx, cfg, 16);
  EXPECT_GE(r.record.train_size, 1u);
  EXPECT_GE(r.record.dev_size, 1u);
  const std::vector<TokenId> bos{Vocabulary::kBos};
  const std::span<const TokenId> head(kCtx.tokens.data(), 16);
  auto nll = [&](const AdapterState* a) {
    double s = 0;
    for (double x : score_logprobs(*m, a, bos, head)) s -= x;
    return s;
  };
  EXPECT_LT(nll(&r.adapter), nll(nullptr));
}
