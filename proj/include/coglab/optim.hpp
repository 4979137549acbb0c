#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "coglab/model.hpp"

namespace coglab {

// Which transformer layers (plus embedding / LM head) a run may update.
// budget_k counts transformer layers only.
struct TrainPlan {
  std::vector<int> trainable_layers;  // sorted, unique
  bool train_embedding = false;
  bool train_lm_head = false;
  std::string label;

  int budget_k() const { return static_cast<int>(trainable_layers.size()); }

  void normalize() {
    std::sort(trainable_layers.begin(), trainable_layers.end());
    trainable_layers.erase(std::unique(trainable_layers.begin(), trainable_layers.end()),
                           trainable_layers.end());
  }

  void validate(int n_layers) const {
    for (int l : trainable_layers)
      if (l < 0 || l >= n_layers)
        throw PlanError("plan layer index out of range: " + std::to_string(l));
  }

  static TrainPlan full(int n_layers, std::string label = "full") {
    TrainPlan p;
    p.trainable_layers.resize(static_cast<std::size_t>(n_layers));
    for (int i = 0; i < n_layers; ++i) p.trainable_layers[static_cast<std::size_t>(i)] = i;
    p.train_embedding = true;
    p.train_lm_head = true;
    p.label = std::move(label);
    return p;
  }
};

using TrainableSet = std::set<std::string>;

// Expands a plan into the exact parameter-name set the optimizer may touch.
// With adapters attached, plan layers contribute only their adapter tensors;
// embedding and LM head stay full-weight and follow the plan flags.
template <typename S>
TrainableSet apply_train_plan(const ModelState<S>& m, const TrainPlan& plan) {
  plan.validate(m.config.n_layers);
  std::set<int> layer_set(plan.trainable_layers.begin(), plan.trainable_layers.end());
  TrainableSet names;
  for_each_param(m.p, m.config, [&](const std::string& name, const Mat<S>&) {
    const std::string group = param_group(name);
    const bool is_adapter = name.size() > 7 && (name.rfind("lora_a") == name.size() - 6 ||
                                                name.rfind("lora_b") == name.size() - 6);
    if (group == "embedding") {
      if (plan.train_embedding) names.insert(name);
    } else if (group == "lm_head") {
      if (plan.train_lm_head) names.insert(name);
    } else {
      const int layer = param_layer(name);
      if (layer_set.count(layer) == 0) return;
      if (m.has_adapters) {
        if (is_adapter) names.insert(name);
      } else {
        names.insert(name);
      }
    }
  });
  return names;
}

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Moment accumulators exist only for trainable parameters.
template <typename S>
struct OptimizerState {
  AdamWConfig hp;
  long step = 0;
  std::map<std::string, Mat<S>> m;
  std::map<std::string, Mat<S>> v;
};

template <typename S>
OptimizerState<S> init_optimizer(const ModelState<S>& model, const TrainableSet& trainable,
                                 const AdamWConfig& hp) {
  OptimizerState<S> opt;
  opt.hp = hp;
  for_each_param(model.p, model.config, [&](const std::string& name, const Mat<S>& t) {
    if (trainable.count(name) == 0) return;
    opt.m[name] = Mat<S>::Zero(t.rows(), t.cols());
    opt.v[name] = Mat<S>::Zero(t.rows(), t.cols());
  });
  return opt;
}

// AdamW with bias-corrected moments and decoupled weight decay. Only the
// trainable set is updated; everything else is left untouched.
template <typename S>
void optimizer_step(ModelState<S>& model, const ParamStore<S>& grads, OptimizerState<S>& opt,
                    const TrainableSet& trainable) {
  opt.step += 1;
  const double b1 = opt.hp.beta1, b2 = opt.hp.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));

  std::map<std::string, const Mat<S>*> grad_by_name;
  for_each_param(grads, model.config, [&](const std::string& name, const Mat<S>& g) {
    grad_by_name[name] = &g;
  });

  for_each_param(model.p, model.config, [&](const std::string& name, Mat<S>& param) {
    if (trainable.count(name) == 0) return;
    auto it = grad_by_name.find(name);
    if (it == grad_by_name.end() || it->second->rows() != param.rows() ||
        it->second->cols() != param.cols())
      throw ConsistencyError("missing gradient for trainable parameter " + name);
    const Mat<S>& g = *it->second;
    Mat<S>& mom = opt.m.at(name);
    Mat<S>& vel = opt.v.at(name);
    const int R = static_cast<int>(param.rows()), C = static_cast<int>(param.cols());
    for (int i = 0; i < R; ++i) {
      for (int j = 0; j < C; ++j) {
        const double gd = static_cast<double>(g(i, j));
        double md = b1 * static_cast<double>(mom(i, j)) + (1.0 - b1) * gd;
        double vd = b2 * static_cast<double>(vel(i, j)) + (1.0 - b2) * gd * gd;
        mom(i, j) = static_cast<S>(md);
        vel(i, j) = static_cast<S>(vd);
        const double mhat = md / bc1;
        const double vhat = vd / bc2;
        const double upd =
            mhat / (std::sqrt(vhat) + opt.hp.eps) + opt.hp.weight_decay * static_cast<double>(param(i, j));
        param(i, j) = static_cast<S>(static_cast<double>(param(i, j)) - opt.hp.lr * upd);
      }
    }
  });
}

}  // namespace coglab
