#pragma once

#include "coglab/model.hpp"
#include "coglab/optim.hpp"

namespace coglab {

// Adds zero-impact adapters (A random, B zero) to the attention and FFN
// projections of the plan's trainable layers. Base weights stay frozen from
// here on; only adapter tensors (plus embedding / LM head when flagged)
// remain trainable.
template <typename S>
void attach_lora(ModelState<S>& m, const LoRAConfig& cfg, const TrainPlan& plan) {
  if (m.has_adapters) throw StateError("adapters already attached");
  if (cfg.rank <= 0) throw ConfigError("lora rank must be positive");
  if (cfg.rank >= m.config.d_model) throw ConfigError("lora rank must be < d_model");
  plan.validate(m.config.n_layers);

  Rng rng(derive_seed(m.seed, "lora-init"));
  const double sd = 0.02;
  auto make_pair = [&](int d_in, int d_out) {
    LoraPair<S> p;
    p.a.resize(d_in, cfg.rank);
    for (int i = 0; i < d_in; ++i)
      for (int j = 0; j < cfg.rank; ++j) p.a(i, j) = static_cast<S>(rng.normal() * sd);
    p.b = Mat<S>::Zero(cfg.rank, d_out);
    return p;
  };

  const int d = m.config.d_model, f = m.config.d_ffn;
  m.p.adapters.assign(static_cast<std::size_t>(m.config.n_layers), LayerAdapters<S>{});
  for (int l : plan.trainable_layers) {
    auto& A = m.p.adapters[static_cast<std::size_t>(l)];
    A.present = true;
    A.wq = make_pair(d, d);
    A.wk = make_pair(d, d);
    A.wv = make_pair(d, d);
    A.wo = make_pair(d, d);
    A.w1 = make_pair(d, f);
    A.w2 = make_pair(f, d);
  }
  m.has_adapters = true;
  m.lora = cfg;
}

}  // namespace coglab
