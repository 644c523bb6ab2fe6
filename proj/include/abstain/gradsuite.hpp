#pragma once

// Finite-difference gradient checks over every differentiable op and every loss.

#include <functional>
#include <string>
#include <vector>

#include "abstain/autodiff.hpp"
#include "abstain/gradcheck.hpp"
#include "abstain/losses.hpp"
#include "abstain/rng.hpp"

namespace abstain {

struct GradCase {
  std::string name;
  // Builds the input and the function under test for one seed.
  std::function<std::pair<Tensor, std::function<ad::Var(ad::Var)>>(Rng&)> make;
};

struct GradCaseResult {
  std::string name;
  std::uint64_t seed;
  double max_rel_error;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, for ops with a kink or pole there.
inline Tensor away_from_zero(Rng& rng, Shape shape, double lo = 0.2, double hi = 1.5) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

inline LabelMask random_labels(Rng& rng, std::size_t b, std::size_t h, std::size_t w, std::size_t k) {
  LabelMask m(b, h, w, std::uint8_t{0});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<std::uint8_t>(rng.below(k));
  return m;
}

// Weighted sum with fixed random weights, so every output coordinate matters.
inline ad::Var probe_sum(ad::Var y, const Tensor& w) { return ad::reduce_sum(ad::mul(y, y.tape().constant(w))); }

}  // namespace detail

inline std::vector<GradCase> gradient_cases() {
  using namespace detail;
  using F = std::function<ad::Var(ad::Var)>;
  using R = std::pair<Tensor, F>;
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, std::function<ad::Var(ad::Var)> op, std::function<Tensor(Rng&, Shape)> input) {
    cases.push_back({name, [op, input](Rng& rng) -> R {
                       Shape s{2, 3, 3, 3};
                       auto x = input(rng, s);
                       // Output shape is discovered once on a scratch tape.
                       ad::Tape t;
                       auto w = random_tensor(rng, op(t.constant(x)).shape());
                       return {x, [op, w](ad::Var v) { return probe_sum(op(v), w); }};
                     }});
  };
  auto plain = [](Rng& r, Shape s) { return random_tensor(r, std::move(s)); };
  auto positive = [](Rng& r, Shape s) { return random_tensor(r, std::move(s), 0.3, 2.0); };
  auto nonzero = [](Rng& r, Shape s) { return away_from_zero(r, std::move(s)); };

  unary("relu", [](ad::Var v) { return ad::relu(v); }, nonzero);
  unary("sigmoid", [](ad::Var v) { return ad::sigmoid(v); }, plain);
  unary("softmax_channel", [](ad::Var v) { return ad::softmax_channel(v); }, plain);
  unary("log", [](ad::Var v) { return ad::log(v); }, positive);
  unary("abs", [](ad::Var v) { return ad::abs(v); }, nonzero);
  unary("scale", [](ad::Var v) { return ad::scale(v, -1.7); }, plain);
  unary("add_scalar", [](ad::Var v) { return ad::add_scalar(v, 0.4); }, plain);
  unary("one_minus", [](ad::Var v) { return ad::one_minus(v); }, plain);
  unary("pow_scalar", [](ad::Var v) { return ad::pow_scalar(v, 0.7); }, positive);
  unary("clamp_min", [](ad::Var v) { return ad::clamp_min(v, 0.0); }, nonzero);
  unary("reduce_sum", [](ad::Var v) { return ad::reduce_sum(v); }, plain);
  unary("reduce_mean", [](ad::Var v) { return ad::reduce_mean(v); }, plain);
  unary("channel_sum", [](ad::Var v) { return ad::channel_sum(v); }, plain);
  unary("reshape", [](ad::Var v) { return ad::reshape(v, Shape{6, 9}); }, plain);
  unary("flatten", [](ad::Var v) { return ad::flatten(v); }, plain);
  unary("slice_channels", [](ad::Var v) { return ad::slice_channels(v, 1, 2); }, plain);
  unary("adaptive_avg_pool", [](ad::Var v) { return ad::adaptive_avg_pool(v, 2); }, plain);
  unary("batch_mean", [](ad::Var v) { return ad::batch_mean(ad::flatten(v)); }, plain);

  auto binary = [&](std::string name, std::function<ad::Var(ad::Var, ad::Var)> op, std::function<Tensor(Rng&, Shape)> other,
                    bool wrt_first) {
    cases.push_back({name, [op, other, wrt_first](Rng& rng) -> R {
                       Shape s{2, 3, 2, 2};
                       auto x = random_tensor(rng, s, 0.3, 1.5);
                       auto y = other(rng, s);
                       auto w = random_tensor(rng, s);
                       return {x, [op, y, w, wrt_first](ad::Var v) {
                                 auto c = v.tape().constant(y);
                                 return probe_sum(wrt_first ? op(v, c) : op(c, v), w);
                               }};
                     }});
  };
  binary("add", [](ad::Var a, ad::Var b) { return ad::add(a, b); }, plain, true);
  binary("sub/lhs", [](ad::Var a, ad::Var b) { return ad::sub(a, b); }, plain, true);
  binary("sub/rhs", [](ad::Var a, ad::Var b) { return ad::sub(a, b); }, plain, false);
  binary("mul", [](ad::Var a, ad::Var b) { return ad::mul(a, b); }, plain, true);
  binary("div/lhs", [](ad::Var a, ad::Var b) { return ad::div(a, b); }, positive, true);
  binary("div/rhs", [](ad::Var a, ad::Var b) { return ad::div(a, b); }, plain, false);

  // conv2d and linear, with respect to each operand in turn.
  for (std::size_t ks : {std::size_t{3}, std::size_t{1}}) {
    for (int which = 0; which < 3; ++which) {
      static const char* names[] = {"input", "weight", "bias"};
      cases.push_back({"conv2d_" + std::to_string(ks) + "x" + std::to_string(ks) + "/" + names[which], [ks, which](Rng& rng) -> R {
                         Tensor xs[3] = {random_tensor(rng, Shape{2, 2, 4, 5}), random_tensor(rng, Shape{3, 2, ks, ks}),
                                         random_tensor(rng, Shape{3})};
                         auto w = random_tensor(rng, Shape{2, 3, 4, 5});
                         Tensor x = xs[which];
                         return {x, [xs, which, w](ad::Var v) {
                                   auto& t = v.tape();
                                   ad::Var in[3];
                                   for (int i = 0; i < 3; ++i) in[i] = i == which ? v : t.constant(xs[i]);
                                   return probe_sum(ad::conv2d(in[0], in[1], in[2]), w);
                                 }};
                       }});
    }
  }
  for (int which = 0; which < 3; ++which) {
    static const char* names[] = {"input", "weight", "bias"};
    cases.push_back({std::string("linear/") + names[which], [which](Rng& rng) -> R {
                       Tensor xs[3] = {random_tensor(rng, Shape{3, 5}), random_tensor(rng, Shape{4, 5}), random_tensor(rng, Shape{4})};
                       auto w = random_tensor(rng, Shape{3, 4});
                       Tensor x = xs[which];
                       return {x, [xs, which, w](ad::Var v) {
                                 auto& t = v.tape();
                                 ad::Var in[3];
                                 for (int i = 0; i < 3; ++i) in[i] = i == which ? v : t.constant(xs[i]);
                                 return probe_sum(ad::linear(in[0], in[1], in[2]), w);
                               }};
                     }});
  }
  cases.push_back({"gather_class", [](Rng& rng) -> R {
                     auto labels = random_labels(rng, 2, 3, 3, 3);
                     auto w = random_tensor(rng, Shape{2, 1, 3, 3});
                     return {random_tensor(rng, Shape{2, 3, 3, 3}),
                             [labels, w](ad::Var v) { return probe_sum(ad::gather_class(v, labels), w); }};
                   }});

  // Losses, differentiated with respect to the logits.
  constexpr std::size_t k = 3;
  auto loss_case = [&](std::string name, std::size_t channels, std::function<ad::Var(ad::Var, const LabelMask&)> loss) {
    cases.push_back({name, [channels, loss](Rng& rng) -> R {
                       auto labels = random_labels(rng, 2, 3, 3, k);
                       return {random_tensor(rng, Shape{2, channels, 3, 3}, -2.0, 2.0),
                               [labels, loss](ad::Var v) { return loss(ad::softmax_channel(v), labels); }};
                     }});
  };
  LossConfig lc;
  const NoisePrior prior{0.2, {0.1, 0.2, 0.3}};
  loss_case("loss/ce", k, [](ad::Var p, const LabelMask& l) { return cross_entropy(p, l); });
  loss_case("loss/gce", k, [lc](ad::Var p, const LabelMask& l) { return gce(p, l, lc.q); });
  loss_case("loss/sce", k, [lc](ad::Var p, const LabelMask& l) { return sce(p, l, lc.sce_alpha, lc.sce_beta, lc.rce_floor); });
  loss_case("loss/dice", k, [lc](ad::Var p, const LabelMask& l) { return dice(p, l, lc.dice_eps); });
  loss_case("loss/dac", k + 1, [](ad::Var p, const LabelMask& l) { return dac_loss(p, l, 0.7).value; });
  loss_case("loss/idac", k + 1, [prior](ad::Var p, const LabelMask& l) { return idac_loss(p, l, 0.7, prior).value; });
  loss_case("loss/gac", k + 1,
            [prior, lc](ad::Var p, const LabelMask& l) { return abstention_wrap(LossKind::gce, p, l, 0.7, prior, lc).value; });
  loss_case("loss/sac", k + 1,
            [prior, lc](ad::Var p, const LabelMask& l) { return abstention_wrap(LossKind::sce, p, l, 0.7, prior, lc).value; });
  for (int wrt_head = 0; wrt_head < 2; ++wrt_head) {
    cases.push_back({wrt_head ? "loss/ads/head" : "loss/ads/logits", [wrt_head, prior, lc](Rng& rng) -> R {
                       auto labels = random_labels(rng, 2, 3, 3, k);
                       auto logits = random_tensor(rng, Shape{2, k, 3, 3}, -2.0, 2.0);
                       auto head = random_tensor(rng, Shape{2, k}, -2.0, 2.0);
                       return {wrt_head ? head : logits, [=](ad::Var v) {
                                 auto& t = v.tape();
                                 auto lg = wrt_head ? t.constant(logits) : v;
                                 auto hd = wrt_head ? v : t.constant(head);
                                 return ads_loss(ad::softmax_channel(lg), ad::sigmoid(hd), labels, 0.7, prior, lc.dice_eps).value;
                               }};
                     }});
  }
  return cases;
}

/// Runs every case for seeds 0..n_seeds-1.
inline std::vector<GradCaseResult> run_gradient_suite(std::uint64_t base_seed, std::size_t n_seeds) {
  std::vector<GradCaseResult> out;
  const auto cases = gradient_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci)
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto seed = base_seed + s;
      Rng rng(derive_seed(seed, ci));
      auto [x, f] = cases[ci].make(rng);
      out.push_back({cases[ci].name, seed, ad::grad_check(f, x).max_rel_error});
    }
  return out;
}

}  // namespace abstain
