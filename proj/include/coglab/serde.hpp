#pragma once

#include <nlohmann/json.hpp>

#include "coglab/model.hpp"
#include "coglab/optim.hpp"

namespace coglab {

using Json = nlohmann::json;

inline void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
           {"n_heads", c.n_heads},     {"d_ffn", c.d_ffn},
           {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
           {"tie_embeddings", c.tie_embeddings}};
}

inline void from_json(const Json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ffn").get_to(c.d_ffn);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("context_len").get_to(c.context_len);
  c.tie_embeddings = j.value("tie_embeddings", false);
}

inline void to_json(Json& j, const TrainPlan& p) {
  j = Json{{"label", p.label},
           {"layers", p.trainable_layers},
           {"embed", p.train_embedding},
           {"head", p.train_lm_head},
           {"k", p.budget_k()}};
}

inline void from_json(const Json& j, TrainPlan& p) {
  j.at("label").get_to(p.label);
  j.at("layers").get_to(p.trainable_layers);
  j.at("embed").get_to(p.train_embedding);
  j.at("head").get_to(p.train_lm_head);
  p.normalize();
}

inline void to_json(Json& j, const LoRAConfig& c) {
  j = Json{{"rank", c.rank}, {"scaling", c.scaling}};
}

inline void from_json(const Json& j, LoRAConfig& c) {
  j.at("rank").get_to(c.rank);
  j.at("scaling").get_to(c.scaling);
}

inline void to_json(Json& j, const AdamWConfig& c) {
  j = Json{{"lr", c.lr},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"weight_decay", c.weight_decay}};
}

inline void from_json(const Json& j, AdamWConfig& c) {
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
  j.at("weight_decay").get_to(c.weight_decay);
}

}  // namespace coglab
