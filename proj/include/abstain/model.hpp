#pragma once

// Toy convolutional segmenter: conv3x3 -> relu -> conv3x3 -> relu -> conv1x1.
// It stands in for a full U-Net; what is under test here is loss and schedule behaviour,
// not backbone capacity.
//
// Pixel abstention adds a (k+1)-th output channel. Class-wise abstention keeps k output
// channels and adds a head: adaptive_avg_pool(logits, w x w) -> flatten -> linear -> sigmoid,
// producing one abstention probability per class and sample.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "abstain/autodiff.hpp"
#include "abstain/error.hpp"
#include "abstain/losses.hpp"
#include "abstain/rng.hpp"
#include "abstain/tensor.hpp"

namespace abstain {

struct SegNetConfig {
  std::size_t in_channels = 3;
  std::size_t hidden_channels = 16;
  std::size_t num_classes = 4;  // k, background included
  AbstentionMode abstention_mode = AbstentionMode::none;
  std::size_t pool_size = 16;  // head pooling grid side w
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  double input_shift = 0.5;  // subtracted from every input intensity before conv1

  std::size_t output_channels() const { return num_classes + (abstention_mode == AbstentionMode::pixel ? 1 : 0); }

  // Pool side after clamping to the feature map.
  std::size_t effective_pool() const { return std::min({pool_size, image_height, image_width}); }

  void validate() const {
    if (in_channels == 0 || hidden_channels == 0) throw ConfigError("model: channel counts must be positive");
    if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
    if (pool_size == 0) throw ConfigError("model: pool_size must be >= 1");
    if (image_height < 4 || image_width < 4) throw ConfigError("model: images must be at least 4x4");
    if (!std::isfinite(input_shift)) throw ConfigError("model: input_shift must be finite");
  }
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Ordered, named parameter set. Order is fixed by init_params and is also the
/// checkpoint order.
struct Parameters {
  std::vector<NamedTensor> tensors;

  Tensor& operator[](const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return t.value;
    throw Error("no parameter named '" + name + "'");
  }
  const Tensor& operator[](const std::string& name) const { return const_cast<Parameters&>(*this)[name]; }
  bool contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
  }
  std::size_t size() const noexcept { return tensors.size(); }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i)
      if (a.tensors[i].name != b.tensors[i].name || !(a.tensors[i].value == b.tensors[i].value)) return false;
    return true;
  }
};

/// Weights uniform in +-sqrt(1/fan_in), biases zero. Each tensor draws from its own
/// counter-based stream, so the same seed always yields bit-identical parameters.
inline Parameters init_params(const SegNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Parameters p;
  std::uint64_t stream = 0;
  auto weight = [&](std::string name, Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    Rng rng(derive_seed(seed, stream++));
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    p.tensors.push_back({std::move(name), std::move(t)});
  };
  auto bias = [&](std::string name, std::size_t n) { p.tensors.push_back({std::move(name), Tensor(Shape{n})}); };

  const auto in = cfg.in_channels, hid = cfg.hidden_channels, out = cfg.output_channels(), k = cfg.num_classes;
  weight("conv1.weight", {hid, in, 3, 3}, in * 9);
  bias("conv1.bias", hid);
  weight("conv2.weight", {hid, hid, 3, 3}, hid * 9);
  bias("conv2.bias", hid);
  weight("conv_out.weight", {out, hid, 1, 1}, hid);
  bias("conv_out.bias", out);
  if (cfg.abstention_mode == AbstentionMode::classwise) {
    const auto w = cfg.effective_pool();
    weight("head.weight", {k, k * w * w}, k * w * w);
    bias("head.bias", k);
  }
  return p;
}

struct ForwardResult {
  ad::Var logits;                  // [b, out_ch, h, w]
  std::optional<ad::Var> abstain;  // [b, k], classwise mode only
  std::vector<ad::Var> params;     // leaves, in Parameters order
};

inline ForwardResult forward(ad::Tape& tape, const Parameters& params, const SegNetConfig& cfg, const Tensor& images,
                             bool requires_grad = true) {
  if (images.rank() != 4) throw DimensionError("forward", "rank", 4, images.rank());
  if (images.dim(1) != cfg.in_channels) throw DimensionError("forward", "in_channels", cfg.in_channels, images.dim(1));
  if (images.dim(2) < 4 || images.dim(3) < 4) throw DimensionError("forward: images must be at least 4x4", "height");
  ForwardResult r;
  for (const auto& t : params.tensors) r.params.push_back(tape.leaf(t.value, requires_grad));
  Tensor centred = images;
  for (auto& v : centred.data()) v -= cfg.input_shift;
  auto x = tape.constant(std::move(centred));
  auto h1 = ad::relu(ad::conv2d(x, r.params[0], r.params[1]));
  auto h2 = ad::relu(ad::conv2d(h1, r.params[2], r.params[3]));
  r.logits = ad::conv2d(h2, r.params[4], r.params[5]);
  if (cfg.abstention_mode == AbstentionMode::classwise) {
    const auto side = std::min({cfg.pool_size, images.dim(2), images.dim(3)});
    // The head sees pooled class probabilities, which keeps its input bounded.
    auto pooled = ad::flatten(ad::adaptive_avg_pool(ad::softmax_channel(r.logits), side));
    r.abstain = ad::sigmoid(ad::linear(pooled, r.params[6], r.params[7]));
  }
  return r;
}

// Argmax over the k class channels only; an abstention channel never wins at evaluation.
inline LabelMask predict_labels(const Tensor& logits, std::size_t num_classes) {
  const std::size_t nb = logits.dim(0), nc = logits.dim(1), h = logits.dim(2), w = logits.dim(3), plane = h * w;
  LabelMask out(nb, h, w, 0);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      std::size_t best = 0;
      double bv = logits[b * nc * plane + i];
      for (std::size_t c = 1; c < num_classes; ++c) {
        const double v = logits[(b * nc + c) * plane + i];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[b * plane + i] = static_cast<std::uint8_t>(best);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerState {
  long step = 0;
  double lr = 0.003;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// Decoupled-weight-decay Adam:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
inline void adamw_step(OptimizerState& st, Parameters& params, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size()) throw DimensionError("adamw_step", "parameter_count", params.size(), grads.size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.tensors[i].value.shape()) {
      throw DimensionError("adamw_step: gradient shape mismatch for '" + params.tensors[i].name + "'", params.tensors[i].name);
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j)
      if (!std::isfinite(grads[i][j])) throw NumericError("adamw_step: non-finite gradient in '" + params.tensors[i].name + "'", j);
  }
  if (st.m.empty()) {
    for (const auto& t : params.tensors) {
      st.m.emplace_back(t.value.shape());
      st.v.emplace_back(t.value.shape());
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& p = params.tensors[i].value;
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
      const double mh = m[j] / c1, vh = v[j] / c2;
      p[j] -= st.lr * (mh / (std::sqrt(vh) + st.eps) + st.weight_decay * p[j]);
    }
  }
}

// Step decay: initial_lr * 0.2^floor(epoch / 10).
inline double lr_at(int epoch, double initial_lr) {
  if (epoch < 0) throw RangeError("lr_at: negative epoch");
  return initial_lr * std::pow(0.2, epoch / 10);
}

// ---------------------------------------------------------------------------
// Checkpoints: "ABSTCKPT", u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rank, u64 extents, f64 data; all little-endian.

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is, const std::string& path) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError(path, "truncated checkpoint");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'A', 'B', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Parameters& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path, "cannot open for writing");
  os.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params.tensors) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) detail::put_le<std::uint64_t>(os, e);
    for (double d : t.value.data()) detail::put_le<double>(os, d);
  }
  if (!os) throw FormatError(path, "write failed");
}

inline Parameters load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path, "cannot open");
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError(path, "bad checkpoint magic");
  const auto version = detail::get_le<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw FormatError(path, "unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is, path);
  Parameters p;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError(path, "truncated tensor name");
    const auto rank = detail::get_le<std::uint32_t>(is, path);
    Shape shape(rank);
    for (auto& e : shape) e = detail::get_le<std::uint64_t>(is, path);
    Tensor t(shape);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = detail::get_le<double>(is, path);
    p.tensors.push_back({std::move(name), std::move(t)});
  }
  return p;
}

}  // namespace abstain
