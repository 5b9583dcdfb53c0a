#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ctxmem/evaluation.hpp"
#include "ctxmem/streaming.hpp"
#include "test_support.hpp"

using namespace ctxmem;
namespace fs = std::filesystem;

namespace {

StreamConfig quick_stream(std::size_t chunk) {
  StreamConfig s;
  s.chunk_length = chunk;
  s.retention_ratio = 0.25;
  s.pipeline.elicitation.n_qa = 4;
  s.pipeline.elicitation.n_open = 2;
  s.pipeline.elicitation.entry_length = 4;
  s.pipeline.elicitation.seed = 1;
  s.pipeline.selection.k = 5;
  s.pipeline.consolidation.max_epochs = 1;
  s.pipeline.consolidation.learning_rate = 1e-2;
  s.pipeline.consolidation.adapter.dropout = 0.0;
  return s;
}

}  // namespace

TEST(Chunking, CoversContextInOrder) {
  auto t = gen_fact_recall(1, 10, 2);
  auto chunks = chunk_context(t.context, 17);
  std::size_t total = 0;
  TokenSequence joined;
  for (const auto& c : chunks) {
    EXPECT_LE(c.size(), 17u);
    total += c.size();
    joined.insert(joined.end(), c.tokens.begin(), c.tokens.end());
  }
  EXPECT_EQ(total, t.context.size());
  EXPECT_EQ(joined, t.context.tokens);
  EXPECT_EQ(chunks.size(), (t.context.size() + 16) / 17);
  EXPECT_THROW(chunk_context(t.context, 0), ConfigError);
}

TEST(Retention, RoundsHalfUpAndKeepsSuffix) {
  EXPECT_EQ(retained_length(100, 0.1), 10u);
  EXPECT_EQ(retained_length(5, 0.5), 3u);
  EXPECT_EQ(retained_length(7, 0.0), 0u);
  EXPECT_EQ(retained_length(7, 1.0), 7u);
  EXPECT_THROW(retained_length(7, 1.5), ConfigError);
  auto t = gen_fact_recall(1, 6, 2);
  auto s = retained_suffix(t.context, 0.2);
  EXPECT_TRUE(std::equal(s.tokens.rbegin(), s.tokens.rend(), t.context.tokens.rbegin()));
}

TEST(Streaming, DefaultChunkScalesWithWindow) {
  EXPECT_EQ(default_chunk_length(8192), 5000u);
  EXPECT_EQ(default_chunk_length(512), 312u);
  StreamConfig s;
  s.chunk_length = 600;
  EXPECT_THROW(s.validate(512), ConfigError);
  s.chunk_length = 0;
  EXPECT_NO_THROW(s.validate(512));
}

TEST(Streaming, TurnsFollowChunksAndPromptsStayShort) {
  auto m = ctxmem::testing::small_tiny_model(256);
  auto t = gen_fact_recall(2, 8, 2);
  auto cfg = quick_stream(40);
  const auto dir = fs::temp_directory_path() / "ctxmem_test_stream";
  fs::remove_all(dir);
  StreamState st = sequential_transform(m, t.context, cfg, dir);
  const std::size_t n_chunks = (t.context.size() + 39) / 40;
  EXPECT_EQ(st.turn, n_chunks);
  EXPECT_EQ(st.chunks_consumed, n_chunks);
  ASSERT_EQ(st.turns.size(), n_chunks);
  EXPECT_LT(st.peak_context_tokens, t.context.size());
  EXPECT_EQ(st.retained.size(), retained_length(t.context.size(), 0.25));
  for (std::size_t i = 0; i < n_chunks; ++i) {
    EXPECT_EQ(st.turns[i].chunk_begin, i * 40);
    EXPECT_TRUE(fs::exists(dir / st.turns[i].checkpoint_file));
    EXPECT_TRUE(fs::exists(dir / st.turns[i].transfer_file));
  }
  ASSERT_TRUE(st.adapter.has_value());
  EXPECT_EQ(load_adapter(dir / st.turns.back().checkpoint_file), *st.adapter);
  std::ifstream in(dir / "stream.json");
  auto doc = nlohmann::json::parse(in);
  EXPECT_EQ(doc.at("turns").size(), n_chunks);
  fs::remove_all(dir);
}

TEST(Streaming, SingleChunkMatchesOneTransformation) {
  auto m = ctxmem::testing::small_tiny_model(256);
  auto t = gen_fact_recall(3, 4, 2);
  auto cfg = quick_stream(200);
  StreamState st = sequential_transform(m, t.context, cfg);
  ASSERT_EQ(st.turn, 1u);
  TurnResult direct = transform_context(*m, nullptr, t.context, cfg.pipeline);
  EXPECT_EQ(*st.adapter, direct.consolidation.adapter);
}

TEST(Streaming, MergeContinuityFoldsAdapters) {
  auto m = ctxmem::testing::small_tiny_model(256);
  auto t = gen_fact_recall(2, 8, 2);
  auto cfg = quick_stream(32);  // two full turns over the 64-token context
  cfg.continuity = AdapterContinuity::merge;
  StreamState st = sequential_transform(m, t.context, cfg);
  EXPECT_FALSE(st.adapter.has_value());
  EXPECT_NE(st.model->fingerprint(), m->fingerprint());
  auto answer = infer_with_memory(st, "what is the pet of bako?", 3);
  EXPECT_LE(answer.size(), 3u);
}

TEST(Streaming, FailedTurnReportsLastGoodState) {
  auto m = ctxmem::testing::small_tiny_model(256);
  auto t = gen_fact_recall(2, 8, 2);
  auto cfg = quick_stream(40);
  cfg.pipeline.elicitation.n_qa = 1;
  cfg.pipeline.elicitation.n_open = 1;  // 2 entries cannot be split train/dev
  try {
    sequential_transform(m, t.context, cfg);
    FAIL() << "expected StreamError";
  } catch (const StreamError& e) {
    EXPECT_EQ(e.last_good().turn, 0u);
    EXPECT_NE(std::string(e.what()).find("turn 1"), std::string::npos);
  }
}

TEST(Streaming, TurnSeedsDiffer) {
  PipelineConfig p;
  p.elicitation.seed = 7;
  EXPECT_EQ(streaming::turn_config(p, 0).elicitation.seed, 7u);
  EXPECT_NE(streaming::turn_config(p, 1).elicitation.seed, streaming::turn_config(p, 2).elicitation.seed);
}
