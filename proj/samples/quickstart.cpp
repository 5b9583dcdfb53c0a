// Transforms a small fact-recall context into an adapter and compares the
// three conditions. Usage: ctxmem_sample [checkpoint]
//
// Without a checkpoint a randomly initialized model is used, which runs the
// whole pipeline but recalls nothing.

#include <iostream>

#include "ctxmem/ctxmem.hpp"

using namespace ctxmem;

int main(int argc, char** argv) {
  std::shared_ptr<const TinyTransformer> model;
  if (argc > 1) {
    model = TinyTransformer::load(argv[1]);
  } else {
    TransformerConfig cfg;
    cfg.vocab_size = Vocabulary::reference().size();
    cfg.context_window = 256;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    model = TinyTransformer::create_random(cfg, 1);
  }

  const TaskInstance task = gen_fact_recall(7, 4, 4);
  std::cout << "context: " << task.context.text << "\n";

  StreamConfig cfg;
  cfg.chunk_length = 0;
  cfg.retention_ratio = 0.0;
  cfg.pipeline.elicitation.n_qa = 24;
  cfg.pipeline.elicitation.n_open = 8;
  cfg.pipeline.elicitation.entry_length = 8;
  cfg.pipeline.selection.k = 24;
  cfg.pipeline.consolidation.learning_rate = 1e-3;
  cfg.pipeline.consolidation.max_epochs = 10;

  const double U = run_condition(*model, task, {Condition::full_context, std::nullopt}).score;
  const double L = run_condition(*model, task, {Condition::no_context, std::nullopt}).score;
  StreamState state;
  const double M = run_consolidated(model, task, cfg, &state).score;
  std::cout << "full_context " << U << "\nno_context " << L << "\nconsolidated " << M << "\n";
  if (auto R = recovery_rate(M, U, L)) std::cout << "recovery " << *R << "\n";

  const auto& probe = std::get<QaProbe>(task.probes.front());
  std::cout << probe.question << " ->" << detokenize(*model, infer_with_memory(state, probe.question, 4)) << "\n";
}
