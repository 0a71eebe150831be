#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "zonas/data.hpp"
#include "zonas/search_space.hpp"
#include "zonas/supernet.hpp"

namespace zonas {

/// Bilevel search schedule. Training runs warmup_epochs of weights-only
/// steps, then search_epochs of alternating weight/alpha steps.
struct SearchSchedule {
  std::size_t warmup_epochs = 15;
  std::size_t search_epochs = 35;
  std::size_t batch_size = 64;
  double weight_fraction = 0.5;

  double w_lr = 0.1;
  double w_lr_min = 0.0;
  double w_momentum = 0.9;
  double w_weight_decay = 3e-4;

  double a_lr = 6e-4;
  double a_beta1 = 0.5;
  double a_beta2 = 0.999;
  double a_weight_decay = 1e-3;
  double a_eps = 1e-8;

  double grad_clip = 5.0;

  double beta_start = 0.0;
  double beta_end = 1.0;
  std::string beta_shape = "linear";  // linear | constant

  bool flip = false;  // random horizontal flips on training batches

  std::size_t total_epochs() const { return warmup_epochs + search_epochs; }
  /// Throws ConfigError on warmup > search epochs, non-positive rates, etc.
  void validate() const;
  nlohmann::json to_json() const;
  static SearchSchedule from_json(const nlohmann::json& j);
};

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / (total - 1))) / 2; reaches
/// lr_min on the last step.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min);

/// Beta coefficient for an epoch: 0 during warmup, then start -> end.
double beta_lambda(const SearchSchedule& s, std::size_t epoch);

/// Sum over edges of log(sum of exp over unmasked alphas).
Var beta_regularizer(std::span<const Var> alphas, const SearchSpace& space);

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

/// SGD with momentum and L2 weight decay: v = mu*v + g + wd*w; w -= lr*v.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(std::span<Parameter* const> params, double lr);
  std::vector<Tensor>& velocity() { return velocity_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

/// Adam with L2 weight decay. Entries where the mask is false are skipped
/// entirely: no decay, no moment update.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double weight_decay, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}
  void step(std::span<Parameter* const> params, const std::vector<std::vector<bool>>& masks);

  std::vector<Tensor>& m() { return m_; }
  std::vector<Tensor>& v() { return v_; }
  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, weight_decay_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean cross-entropy and accuracy over `indices`, forward only, in batches.
EvalResult evaluate(Supernet& net, const Dataset& data, const std::vector<std::size_t>& indices,
                    std::size_t batch_size);

/// Mean softmax entropy over the unmasked alphas of each edge.
std::vector<double> alpha_entropy(const SearchSpace& space, const std::vector<std::vector<double>>& alphas);

struct SearchState {
  Supernet net;
  Sgd w_opt;
  Adam a_opt;
  std::size_t epoch = 0;  // epochs completed
  std::size_t step = 0;   // weight steps completed
};

struct SearchOptions {
  std::string checkpoint_dir;  // empty: no checkpoints
  /// Called with each epoch's metrics record as soon as it is complete.
  std::function<void(const nlohmann::json&)> on_epoch;
  /// Called with the wall-clock seconds of each epoch (kept out of the
  /// metrics so replays compare byte for byte).
  std::function<void(std::size_t epoch, double seconds)> on_timing;
};

struct SearchResult {
  Genotype genotype;
  SearchState state;
  std::vector<nlohmann::json> metrics;
  double initial_val_loss = 0.0;
};

/// One epoch: per weight batch, an SGD step on the weight split; after
/// warmup, an Adam step on the next alpha batch with cross-entropy plus
/// lambda * beta_regularizer. Throws NumericError with epoch/batch context on
/// a non-finite loss.
nlohmann::json search_epoch(SearchState& state, const Dataset& data, const SplitStreams& split,
                            const SearchSchedule& schedule, std::uint64_t seed, const std::string& last_checkpoint = {});

/// Warmup + search epochs, then derive_genotype. The network seed is `seed`.
SearchResult run_search(const SearchSpace& space, const SearchSchedule& schedule, SupernetConfig cfg,
                        const Dataset& data, std::uint64_t seed, const SearchOptions& opt = {});

/// Weights-only training of a fixed network for `epochs` over `train`.
void train_weights(Supernet& net, const Dataset& data, const std::vector<std::size_t>& train,
                   const SearchSchedule& schedule, std::size_t epochs, std::uint64_t seed);

void save_checkpoint(const std::string& path, SearchState& state);

/// Reference toy problem: a 3-edge chain over {none, max_pool_3x3,
/// avg_pool_3x3, skip_connect} on planted data, with a short schedule. Only
/// skip_connect passes the pixelwise label signal through undamaged, so the
/// known optimum is skip_connect on every edge.
struct PlantedTask {
  SearchSpace space;
  SupernetConfig net;
  SearchSchedule schedule;
  PlantedSpec data;

  Genotype optimum() const;
};
PlantedTask planted_task();

}  // namespace zonas
