#include "zonas/oneshot.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "zonas/accounting.hpp"
#include "zonas/container.hpp"
#include "zonas/error.hpp"
#include "zonas/rng.hpp"

namespace zonas {

using nlohmann::json;

void SearchSchedule::validate() const {
  if (warmup_epochs > search_epochs)
    throw ConfigError("warmup_epochs (" + std::to_string(warmup_epochs) + ") must not exceed search_epochs (" +
                      std::to_string(search_epochs) + ")");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(weight_fraction > 0.0 && weight_fraction < 1.0)) throw ConfigError("weight_fraction must lie in (0, 1)");
  for (auto [name, v] : {std::pair{"w_lr", w_lr}, {"a_lr", a_lr}, {"grad_clip", grad_clip}, {"a_eps", a_eps}})
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be positive");
  for (auto [name, v] : {std::pair{"w_momentum", w_momentum}, {"a_beta1", a_beta1}, {"a_beta2", a_beta2}})
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1)");
  if (w_weight_decay < 0.0 || a_weight_decay < 0.0 || w_lr_min < 0.0 || w_lr_min > w_lr)
    throw ConfigError("weight decays must be >= 0 and 0 <= w_lr_min <= w_lr");
  if (beta_shape != "linear" && beta_shape != "constant")
    throw ConfigError("beta_shape must be linear or constant, got '" + beta_shape + "'");
}

json SearchSchedule::to_json() const {
  return {{"warmup_epochs", warmup_epochs},   {"search_epochs", search_epochs},   {"batch_size", batch_size},
          {"weight_fraction", weight_fraction}, {"w_lr", w_lr},                   {"w_lr_min", w_lr_min},
          {"w_momentum", w_momentum},         {"w_weight_decay", w_weight_decay}, {"a_lr", a_lr},
          {"a_beta1", a_beta1},               {"a_beta2", a_beta2},               {"a_weight_decay", a_weight_decay},
          {"a_eps", a_eps},                   {"grad_clip", grad_clip},           {"beta_start", beta_start},
          {"beta_end", beta_end},             {"beta_shape", beta_shape},         {"flip", flip}};
}

SearchSchedule SearchSchedule::from_json(const json& j) {
  SearchSchedule s;
  try {
    s.warmup_epochs = j.value("warmup_epochs", s.warmup_epochs);
    s.search_epochs = j.value("search_epochs", s.search_epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.weight_fraction = j.value("weight_fraction", s.weight_fraction);
    s.w_lr = j.value("w_lr", s.w_lr);
    s.w_lr_min = j.value("w_lr_min", s.w_lr_min);
    s.w_momentum = j.value("w_momentum", s.w_momentum);
    s.w_weight_decay = j.value("w_weight_decay", s.w_weight_decay);
    s.a_lr = j.value("a_lr", s.a_lr);
    s.a_beta1 = j.value("a_beta1", s.a_beta1);
    s.a_beta2 = j.value("a_beta2", s.a_beta2);
    s.a_weight_decay = j.value("a_weight_decay", s.a_weight_decay);
    s.a_eps = j.value("a_eps", s.a_eps);
    s.grad_clip = j.value("grad_clip", s.grad_clip);
    s.beta_start = j.value("beta_start", s.beta_start);
    s.beta_end = j.value("beta_end", s.beta_end);
    s.beta_shape = j.value("beta_shape", s.beta_shape);
    s.flip = j.value("flip", s.flip);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("search schedule: ") + e.what());
  }
  s.validate();
  return s;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min) {
  if (total_steps <= 1) return lr0;
  const double t = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
  return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double beta_lambda(const SearchSchedule& s, std::size_t epoch) {
  if (epoch < s.warmup_epochs) return 0.0;
  if (s.beta_shape == "constant") return s.beta_end;
  const double span = s.search_epochs > 1 ? static_cast<double>(s.search_epochs - 1) : 1.0;
  const double t = std::min(1.0, static_cast<double>(epoch - s.warmup_epochs) / span);
  return s.beta_start + (s.beta_end - s.beta_start) * t;
}

Var beta_regularizer(std::span<const Var> alphas, const SearchSpace& space) {
  if (alphas.size() != space.edge_count())
    throw ContractError("beta_regularizer: " + std::to_string(alphas.size()) + " alphas for " +
                        std::to_string(space.edge_count()) + " edges");
  std::vector<Var> terms;
  for (std::size_t e = 0; e < alphas.size(); ++e) terms.push_back(ops::masked_logsumexp(alphas[e], space.edge(e).mask));
  return ops::add_n(terms);
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params)
      for (double& g : p->grad.data()) g *= s;
  }
  return norm;
}

void Sgd::step(std::span<Parameter* const> params, double lr) {
  if (velocity_.empty())
    for (const Parameter* p : params) velocity_.emplace_back(p->value->shape());
  if (velocity_.size() != params.size()) throw ContractError("sgd: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->value->data();
    const auto g = params[i]->grad.data();
    auto v = velocity_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k] + weight_decay_ * w[k];
      w[k] -= lr * v[k];
    }
  }
}

void Adam::step(std::span<Parameter* const> params, const std::vector<std::vector<bool>>& masks) {
  if (m_.empty())
    for (const Parameter* p : params) {
      m_.emplace_back(p->value->shape());
      v_.emplace_back(p->value->shape());
    }
  if (m_.size() != params.size() || masks.size() != params.size())
    throw ContractError("adam: parameter or mask list does not match");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->value->data();
    const auto g = params[i]->grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (!masks[i][k]) continue;
      const double gk = g[k] + weight_decay_ * w[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

EvalResult evaluate(Supernet& net, const Dataset& data, const std::vector<std::size_t>& indices,
                    std::size_t batch_size) {
  EvalResult r;
  if (indices.empty()) return r;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::span<const std::size_t> idx(indices.data() + start, std::min(batch_size, indices.size() - start));
    const auto labels = data.labels_of(idx);
    const Var logits = net.forward(data.images(idx));
    loss += ops::cross_entropy(logits, labels).value().item() * static_cast<double>(idx.size());
    const auto z = logits.value().data();
    const std::size_t C = logits.shape()[1];
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const auto row = z.subspan(n * C, C);
      correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
                 static_cast<std::size_t>(labels[n]);
    }
  }
  r.loss = loss / static_cast<double>(indices.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return r;
}

std::vector<double> alpha_entropy(const SearchSpace& space, const std::vector<std::vector<double>>& alphas) {
  std::vector<double> out;
  for (const auto& set : space.edges()) {
    double h = 0.0;
    for (double w : mixing_weights(set, alphas.at(set.edge_id)))
      if (w > 0.0) h -= w * std::log(w);
    out.push_back(h);
  }
  return out;
}

namespace {

std::vector<std::vector<bool>> alpha_masks(const SearchSpace& space) {
  std::vector<std::vector<bool>> m;
  for (const auto& set : space.edges()) m.push_back(set.mask);
  return m;
}

std::vector<bool> flips_for(std::size_t n, bool enabled, std::uint64_t seed) {
  if (!enabled) return {};
  Rng rng(seed);
  std::vector<bool> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = rng.bernoulli(0.5);
  return f;
}

void zero_all(Supernet& net) {
  for (Parameter* p : net.weights()) p->zero_grad();
  for (Parameter* p : net.alphas()) p->zero_grad();
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t C = logits.shape()[1];
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto row = logits.data().subspan(n * C, C);
    correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
               static_cast<std::size_t>(labels[n]);
  }
  return correct;
}

struct StepStats {
  double loss = 0.0;
  std::size_t correct = 0;
  double grad_norm = 0.0;
};

StepStats weight_step(SearchState& st, const Dataset& data, std::span<const std::size_t> idx,
                      const SearchSchedule& s, double lr, std::uint64_t seed) {
  Supernet& net = st.net;
  zero_all(net);
  Tape tape;
  const auto labels = data.labels_of(idx);
  const Tensor x = data.images(idx, flips_for(idx.size(), s.flip, derive_seed(seed, "flip")));
  const Var logits = net.forward(x, {.tape = &tape, .channel_seed = derive_seed(seed, "channels")});
  const Var loss = ops::cross_entropy(logits, labels);
  tape.backward(loss);
  const auto w = net.weights();
  StepStats r{loss.value().item(), count_correct(logits.value(), labels), clip_grad_norm(w, s.grad_clip)};
  st.w_opt.step(w, lr);
  return r;
}

double alpha_step(SearchState& st, const Dataset& data, std::span<const std::size_t> idx, double lambda,
                  std::uint64_t seed) {
  Supernet& net = st.net;
  zero_all(net);
  Tape tape;
  const Var logits = net.forward(data.images(idx), {.tape = &tape, .channel_seed = derive_seed(seed, "channels")});
  Var loss = ops::cross_entropy(logits, data.labels_of(idx));
  const double ce = loss.value().item();
  if (lambda != 0.0) {
    std::vector<Var> a;
    for (Parameter* p : net.alphas()) a.push_back(tape.watch(*p));
    loss = ops::add(loss, ops::scale(beta_regularizer(a, net.space()), lambda));
  }
  tape.backward(loss);
  st.a_opt.step(net.alphas(), alpha_masks(net.space()));
  return ce;
}

json edge_weights_json(const Supernet& net) {
  json a = json::array();
  const auto alphas = net.alpha_values();
  for (const auto& set : net.space().edges()) a.push_back(mixing_weights(set, alphas[set.edge_id]));
  return a;
}

}  // namespace

json search_epoch(SearchState& st, const Dataset& data, const SplitStreams& split, const SearchSchedule& s,
                  std::uint64_t seed, const std::string& last_checkpoint) {
  const std::size_t epoch = st.epoch;
  const bool warmup = epoch < s.warmup_epochs;
  const double lambda = beta_lambda(s, epoch);
  const auto wb = split.weight.epoch(epoch);
  const auto ab = split.alpha.epoch(epoch);
  const std::size_t total_steps = s.total_epochs() * split.weight.batches_per_epoch();
  const std::uint64_t epoch_seed = derive_seed(derive_seed(seed, "epoch"), epoch);

  double w_loss = 0.0, a_loss = 0.0, max_norm = 0.0;
  std::size_t w_correct = 0, w_seen = 0, a_steps = 0;
  double lr = 0.0;
  for (std::size_t b = 0; b < wb.size(); ++b) {
    const std::uint64_t bseed = derive_seed(epoch_seed, b);
    const char* phase = "weight";
    try {
      lr = cosine_lr(st.step, total_steps, s.w_lr, s.w_lr_min);
      const auto w = weight_step(st, data, wb[b], s, lr, derive_seed(bseed, "w"));
      if (!std::isfinite(w.loss)) throw NumericError("non-finite loss");
      ++st.step;
      w_loss += w.loss * static_cast<double>(wb[b].size());
      w_correct += w.correct;
      w_seen += wb[b].size();
      max_norm = std::max(max_norm, w.grad_norm);
      if (!warmup) {
        phase = "alpha";
        const double l = alpha_step(st, data, ab[b % ab.size()], lambda, derive_seed(bseed, "a"));
        if (!std::isfinite(l)) throw NumericError("non-finite loss");
        a_loss += l;
        ++a_steps;
      }
    } catch (const NumericError& e) {
      throw NumericError("search aborted at epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + " (" +
                         phase + " step): " + e.what() + "; last good checkpoint: " +
                         (last_checkpoint.empty() ? std::string("none") : last_checkpoint));
    }
  }
  zero_all(st.net);
  ++st.epoch;

  const auto val = evaluate(st.net, data, split.alpha.indices(), s.batch_size);
  const auto entropy = alpha_entropy(st.net.space(), st.net.alpha_values());
  double mean_h = 0.0;
  for (double h : entropy) mean_h += h;
  mean_h /= static_cast<double>(entropy.size());
  json rec = {{"epoch", epoch},
              {"phase", warmup ? "warmup" : "search"},
              {"lr", lr},
              {"lambda", lambda},
              {"train_loss", w_loss / static_cast<double>(w_seen)},
              {"train_acc", static_cast<double>(w_correct) / static_cast<double>(w_seen)},
              {"alpha_loss", a_steps ? json(a_loss / static_cast<double>(a_steps)) : json(nullptr)},
              {"val_loss", val.loss},
              {"val_acc", val.accuracy},
              {"max_grad_norm", max_norm},
              {"alpha_entropy", entropy},
              {"mean_alpha_entropy", mean_h},
              {"mixing_weights", edge_weights_json(st.net)}};
  return rec;
}

void save_checkpoint(const std::string& path, SearchState& st) {
  std::vector<NamedTensor> entries;
  const auto w = st.net.weights();
  const auto a = st.net.alphas();
  for (const Parameter* p : w) entries.push_back({p->name, *p->value});
  for (const Parameter* p : a) entries.push_back({p->name, *p->value});
  for (std::size_t i = 0; i < st.w_opt.velocity().size(); ++i)
    entries.push_back({"opt.momentum." + w[i]->name, st.w_opt.velocity()[i]});
  for (std::size_t i = 0; i < st.a_opt.m().size(); ++i) {
    entries.push_back({"opt.adam_m." + a[i]->name, st.a_opt.m()[i]});
    entries.push_back({"opt.adam_v." + a[i]->name, st.a_opt.v()[i]});
  }
  entries.push_back({"meta.counters", Tensor({3}, std::vector<double>{static_cast<double>(st.epoch),
                                                                      static_cast<double>(st.step),
                                                                      static_cast<double>(st.a_opt.steps())})});
  write_container(path, entries);
}

SearchResult run_search(const SearchSpace& space, const SearchSchedule& schedule, SupernetConfig cfg,
                        const Dataset& data, std::uint64_t seed, const SearchOptions& opt) {
  schedule.validate();
  data.validate();
  cfg.seed = seed;
  if (data.channels != cfg.in_channels || data.height != cfg.image_size || data.width != cfg.image_size ||
      data.classes != cfg.classes)
    throw ConfigError("dataset shape does not match the supernet config");
  const auto split = split_and_batch(
      data, {.weight_fraction = schedule.weight_fraction, .seed = derive_seed(seed, "split"),
             .batch_size = schedule.batch_size});

  SearchResult res{Genotype{},
                   SearchState{Supernet(space, cfg), Sgd(schedule.w_momentum, schedule.w_weight_decay),
                               Adam(schedule.a_lr, schedule.a_beta1, schedule.a_beta2, schedule.a_weight_decay,
                                    schedule.a_eps)},
                   {},
                   0.0};
  SearchState& st = res.state;
  res.initial_val_loss = evaluate(st.net, data, split.alpha.indices(), schedule.batch_size).loss;

  AccountingOptions acc;
  acc.batch = schedule.batch_size;
  const json memory = estimate_memory(space, cfg, acc).to_json();
  json mem_summary = memory;
  mem_summary.erase("per_edge");

  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);
  std::string last_checkpoint;
  for (std::size_t e = 0; e < schedule.total_epochs(); ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    json rec = search_epoch(st, data, split, schedule, seed, last_checkpoint);
    rec["memory_estimate"] = mem_summary;
    if (!opt.checkpoint_dir.empty()) {
      last_checkpoint = (std::filesystem::path(opt.checkpoint_dir) / ("epoch_" + std::to_string(e) + ".znsc")).string();
      save_checkpoint(last_checkpoint, st);
    }
    if (opt.on_timing)
      opt.on_timing(e, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (opt.on_epoch) opt.on_epoch(rec);
    res.metrics.push_back(std::move(rec));
  }
  res.genotype = derive_genotype(st.net.space(), st.net.alpha_values());
  return res;
}

void train_weights(Supernet& net, const Dataset& data, const std::vector<std::size_t>& train,
                   const SearchSchedule& s, std::size_t epochs, std::uint64_t seed) {
  SearchState st{std::move(net), Sgd(s.w_momentum, s.w_weight_decay), Adam(s.a_lr, s.a_beta1, s.a_beta2, 0.0, s.a_eps)};
  const BatchStream stream(train, std::min(s.batch_size, train.size()), derive_seed(seed, "train"));
  const std::size_t total = epochs * stream.batches_per_epoch();
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto batches = stream.epoch(e);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double lr = cosine_lr(st.step, total, s.w_lr, s.w_lr_min);
      weight_step(st, data, batches[b], s, lr, derive_seed(derive_seed(seed, e), b));
      ++st.step;
    }
  }
  zero_all(st.net);
  net = std::move(st.net);
}

PlantedTask planted_task() {
  PlantedTask t{SearchSpace::chain(3, {OpKind::kZero, OpKind::kMaxPool3, OpKind::kAvgPool3, OpKind::kIdentity}),
                SupernetConfig{}, SearchSchedule{}, PlantedSpec{}};
  t.net.in_channels = 2 * t.data.pairs;
  t.net.init_channels = 2 * t.data.pairs;
  t.net.image_size = t.data.size;
  t.net.classes = 2;
  t.net.stem = false;
  t.schedule.warmup_epochs = 3;
  t.schedule.search_epochs = 10;
  t.schedule.batch_size = 32;
  // Thirteen epochs leave Adam at 6e-4 far from moving the alphas, and any
  // log-sum-exp pressure flattens them once the planted path fits the data.
  t.schedule.a_lr = 3e-2;
  t.schedule.beta_end = 0.0;
  return t;
}

Genotype PlantedTask::optimum() const {
  return genotype_from_choices(space, std::vector<std::size_t>(space.edge_count(), 3));
}

}  // namespace zonas
