#include "sotu/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sotu/rng.hpp"

namespace sotu {

Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw Error(Errc::InvalidArgument, "unknown activation '" + std::string(s) + "'");
}

const char* to_string(Activation a) noexcept {
  return a == Activation::relu ? "relu" : "tanh";
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw Error(Errc::InvalidArgument, "input_dim must be positive");
  if (hidden_dims.empty()) throw Error(Errc::InvalidArgument, "at least one hidden layer required");
  for (auto h : hidden_dims) {
    if (h == 0) throw Error(Errc::InvalidArgument, "hidden dims must be positive");
  }
  if (embed_dim < 2) throw Error(Errc::InvalidArgument, "embed_dim must be at least 2");
}

namespace {

std::string layer_name(std::size_t i, char kind) {
  return "layer" + std::to_string(i) + "." + kind;
}

DenseTensor uniform_weights(std::size_t in, std::size_t out, std::uint64_t seed) {
  Rng rng(seed);
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-a, a);
  return DenseTensor({in, out}, std::move(w));
}

// Mutable working copy of a model for the inner loops.
struct Layer {
  std::size_t in = 0, out = 0;
  std::vector<double> w;  // in x out, row-major
  std::vector<double> b;  // out
};

struct Net {
  std::vector<Layer> layers;
  Layer head;
  bool has_head = false;
};

Layer load_layer(const DenseTensor& w, const DenseTensor& b, const std::string& what) {
  if (w.rank() != 2 || b.rank() != 1 || b.shape()[0] != w.shape()[1]) {
    throw Error(Errc::ShapeMismatch, what + ": weight " + shape_str(w.shape()) + " / bias " +
                                         shape_str(b.shape()));
  }
  Layer l;
  l.in = w.shape()[0];
  l.out = w.shape()[1];
  l.w.assign(w.values().begin(), w.values().end());
  l.b.assign(b.values().begin(), b.values().end());
  return l;
}

Net load_net(const ParamSet& ps, bool need_head) {
  Net net;
  for (std::size_t i = 0;; ++i) {
    const auto* w = ps.find(layer_name(i, 'w'));
    if (!w) break;
    const auto* b = ps.find(layer_name(i, 'b'));
    if (!b) throw Error(Errc::UnknownName, "missing " + layer_name(i, 'b'));
    net.layers.push_back(load_layer(*w, *b, "layer" + std::to_string(i)));
    if (i > 0 && net.layers[i].in != net.layers[i - 1].out) {
      throw Error(Errc::ShapeMismatch, "layer" + std::to_string(i) + " input does not chain");
    }
  }
  if (net.layers.empty()) throw Error(Errc::UnknownName, "model has no layer0.w");
  const auto* hw = ps.find("head.w");
  const auto* hb = ps.find("head.b");
  if (hw && hb) {
    net.head = load_layer(*hw, *hb, "head");
    net.has_head = true;
    if (net.head.in != net.layers.back().out) {
      throw Error(Errc::ShapeMismatch, "head input does not match embedding size");
    }
  } else if (need_head) {
    throw Error(Errc::UnknownName, "model has no head.w/head.b");
  }
  return net;
}

// out = act(in * W + b) for n rows.
void layer_forward(const Layer& l, Activation act, const double* in, std::size_t n, double* out,
                   bool apply_act) {
  for (std::size_t r = 0; r < n; ++r) {
    double* o = out + r * l.out;
    std::copy(l.b.begin(), l.b.end(), o);
    const double* x = in + r * l.in;
    for (std::size_t p = 0; p < l.in; ++p) {
      const double xp = x[p];
      const double* wrow = l.w.data() + p * l.out;
      for (std::size_t j = 0; j < l.out; ++j) o[j] += xp * wrow[j];
    }
    if (apply_act) {
      for (std::size_t j = 0; j < l.out; ++j) {
        o[j] = act == Activation::relu ? std::max(o[j], 0.0) : std::tanh(o[j]);
      }
    }
  }
}

// hs[0] = input rows; hs[i+1] = activation output of layer i.
std::vector<std::vector<double>> forward_all(const Net& net, Activation act,
                                             std::span<const double> rows, std::size_t n) {
  if (rows.size() != n * net.layers.front().in) {
    throw Error(Errc::ShapeMismatch, "input has " + std::to_string(rows.size()) +
                                         " values, expected " +
                                         std::to_string(n * net.layers.front().in));
  }
  std::vector<std::vector<double>> hs;
  hs.reserve(net.layers.size() + 1);
  hs.emplace_back(rows.begin(), rows.end());
  for (const auto& l : net.layers) {
    std::vector<double> out(n * l.out);
    layer_forward(l, act, hs.back().data(), n, out.data(), true);
    hs.push_back(std::move(out));
  }
  return hs;
}

// Mean cross-entropy; fills dlogits = (softmax - onehot) / n when non-null.
double softmax_xent(const std::vector<double>& logits, std::size_t n, std::size_t c,
                    const std::vector<std::size_t>& target, std::vector<double>* dlogits) {
  double total = 0.0;
  if (dlogits) dlogits->assign(n * c, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.data() + r * c;
    const double m = *std::max_element(z, z + c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(z[j] - m);
    const double lse = m + std::log(sum);
    total += lse - z[target[r]];
    if (dlogits) {
      double* g = dlogits->data() + r * c;
      for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(z[j] - lse) / static_cast<double>(n);
      g[target[r]] -= 1.0 / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(n);
}

std::vector<std::size_t> targets_for(const LabeledDataset& data, std::span<const std::size_t> rows) {
  std::vector<std::size_t> t;
  t.reserve(rows.size());
  for (auto r : rows) t.push_back(data.class_index(data.label(r)));
  return t;
}

void require_head_matches(const Net& net, const LabeledDataset& data) {
  if (net.head.out != data.classes().size()) {
    throw Error(Errc::ShapeMismatch, "head has " + std::to_string(net.head.out) +
                                         " outputs but the class set has " +
                                         std::to_string(data.classes().size()));
  }
}

struct Grads {
  std::vector<Layer> layers;
  Layer head;
};

// Loss and gradient on the given rows of `data`.
double batch_loss_grad(const Net& net, Activation act, std::span<const double> rows,
                       const std::vector<std::size_t>& target, Grads* grads) {
  const std::size_t n = target.size();
  auto hs = forward_all(net, act, rows, n);
  const auto& emb = hs.back();
  const std::size_t c = net.head.out;
  std::vector<double> logits(n * c);
  layer_forward(net.head, act, emb.data(), n, logits.data(), false);
  std::vector<double> dlogits;
  const double loss = softmax_xent(logits, n, c, target, grads ? &dlogits : nullptr);
  if (!std::isfinite(loss)) throw Error(Errc::NonFinite, "loss diverged");
  if (!grads) return loss;

  auto backward_layer = [n](const Layer& l, const std::vector<double>& input,
                            const std::vector<double>& dout, Layer& g,
                            std::vector<double>* din) {
    g.in = l.in;
    g.out = l.out;
    g.w.assign(l.in * l.out, 0.0);
    g.b.assign(l.out, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* x = input.data() + r * l.in;
      const double* d = dout.data() + r * l.out;
      for (std::size_t j = 0; j < l.out; ++j) g.b[j] += d[j];
      for (std::size_t p = 0; p < l.in; ++p) {
        const double xp = x[p];
        double* gw = g.w.data() + p * l.out;
        for (std::size_t j = 0; j < l.out; ++j) gw[j] += xp * d[j];
      }
    }
    if (din) {
      din->assign(n * l.in, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        const double* d = dout.data() + r * l.out;
        double* dx = din->data() + r * l.in;
        for (std::size_t p = 0; p < l.in; ++p) {
          const double* wrow = l.w.data() + p * l.out;
          double s = 0.0;
          for (std::size_t j = 0; j < l.out; ++j) s += wrow[j] * d[j];
          dx[p] = s;
        }
      }
    }
  };

  std::vector<double> dh;
  backward_layer(net.head, emb, dlogits, grads->head, &dh);
  grads->layers.resize(net.layers.size());
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& h = hs[li + 1];
    for (std::size_t k = 0; k < dh.size(); ++k) {
      dh[k] *= act == Activation::relu ? (h[k] > 0.0 ? 1.0 : 0.0) : 1.0 - h[k] * h[k];
    }
    std::vector<double> dprev;
    backward_layer(net.layers[li], hs[li], dh, grads->layers[li], li > 0 ? &dprev : nullptr);
    dh = std::move(dprev);
  }
  return loss;
}

double full_loss(const Net& net, Activation act, const LabeledDataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return batch_loss_grad(net, act, data.features(), targets_for(data, all), nullptr);
}

ParamSet to_paramset(const std::vector<Layer>& layers, const Layer* head) {
  ParamSet ps;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    ps.add(layer_name(i, 'w'), DenseTensor({layers[i].in, layers[i].out}, layers[i].w));
    ps.add(layer_name(i, 'b'), DenseTensor({layers[i].out}, layers[i].b));
  }
  if (head) {
    ps.add("head.w", DenseTensor({head->in, head->out}, head->w));
    ps.add("head.b", DenseTensor({head->out}, head->b));
  }
  return ps;
}

}  // namespace

ParamSet init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<std::size_t> dims{spec.input_dim};
  dims.insert(dims.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  dims.push_back(spec.embed_dim);
  ParamSet ps;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    ps.add(layer_name(i, 'w'), uniform_weights(dims[i], dims[i + 1], derive_seed(seed, i)));
    ps.add(layer_name(i, 'b'), DenseTensor::zeros({dims[i + 1]}));
  }
  return ps;
}

ParamSet init_head(std::size_t embed_dim, std::size_t num_classes, std::uint64_t seed) {
  if (embed_dim == 0 || num_classes == 0) {
    throw Error(Errc::InvalidArgument, "head dimensions must be positive");
  }
  ParamSet ps;
  ps.add("head.w", uniform_weights(embed_dim, num_classes, derive_seed(seed, 0x4ead)));
  ps.add("head.b", DenseTensor::zeros({num_classes}));
  return ps;
}

ParamSet with_head(const ParamSet& backbone, const ParamSet& head) {
  ParamSet ps;
  for (const auto& e : backbone) ps.add(e.name, e.tensor);
  for (const auto& e : head) ps.add(e.name, e.tensor);
  return ps;
}

SplitModel split_head(const ParamSet& model) {
  SplitModel s;
  for (const auto& e : model) {
    if (e.name.starts_with("head.")) {
      s.head.add(e.name, e.tensor);
    } else {
      s.backbone.add(e.name, e.tensor);
    }
  }
  return s;
}

std::size_t backbone_depth(const ParamSet& model) { return load_net(model, false).layers.size(); }

std::size_t backbone_input_dim(const ParamSet& model) {
  return load_net(model, false).layers.front().in;
}

std::size_t backbone_embed_dim(const ParamSet& model) {
  return load_net(model, false).layers.back().out;
}

std::vector<double> embed_batch(const ParamSet& backbone, Activation act,
                                std::span<const double> rows, std::size_t n) {
  auto net = load_net(backbone, false);
  auto hs = forward_all(net, act, rows, n);
  return std::move(hs.back());
}

std::vector<double> embed_forward(const ParamSet& backbone, Activation act,
                                  std::span<const double> x) {
  return embed_batch(backbone, act, x, 1);
}

LossGrad loss_and_grad(const ParamSet& model, Activation act, const LabeledDataset& batch) {
  auto net = load_net(model, true);
  require_head_matches(net, batch);
  std::vector<std::size_t> all(batch.size());
  std::iota(all.begin(), all.end(), 0);
  Grads g;
  LossGrad out;
  out.loss = batch_loss_grad(net, act, batch.features(), targets_for(batch, all), &g);
  // Gradient tensors follow the model's own entry order.
  auto grads = to_paramset(g.layers, &g.head);
  for (const auto& e : model) out.grads.add(e.name, grads.at(e.name));
  return out;
}

double head_accuracy(const ParamSet& model, Activation act, const LabeledDataset& data) {
  auto net = load_net(model, true);
  require_head_matches(net, data);
  const std::size_t n = data.size();
  auto hs = forward_all(net, act, data.features(), n);
  std::vector<double> logits(n * net.head.out);
  layer_forward(net.head, act, hs.back().data(), n, logits.data(), false);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* z = logits.data() + r * net.head.out;
    const auto best = static_cast<std::size_t>(std::max_element(z, z + net.head.out) - z);
    if (data.classes()[best] == data.label(r)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

TrainResult train(const ParamSet& init, const LabeledDataset& data, const Hyper& hyper,
                  Activation act) {
  if (!(hyper.learning_rate > 0.0) || !std::isfinite(hyper.learning_rate)) {
    throw Error(Errc::InvalidArgument, "learning rate must be positive");
  }
  if (hyper.batch_size == 0 || hyper.batch_size > data.size()) {
    throw Error(Errc::InvalidArgument, "batch size must be in [1, " + std::to_string(data.size()) + "]");
  }
  auto net = load_net(init, true);
  require_head_matches(net, data);

  TrainResult result;
  if (hyper.epochs == 0) {
    auto parts = split_head(init);
    result.backbone = std::move(parts.backbone);
    result.head = std::move(parts.head);
    return result;
  }

  const std::size_t n = data.size();
  const std::size_t d = data.dim();
  std::vector<std::size_t> order(n);
  std::vector<double> rows;
  Grads g;
  const double lr = hyper.learning_rate;
  auto step = [lr](Layer& l, const Layer& gl) {
    for (std::size_t k = 0; k < l.w.size(); ++k) l.w[k] -= lr * gl.w[k];
    for (std::size_t k = 0; k < l.b.size(); ++k) l.b[k] -= lr * gl.b[k];
  };

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(hyper.seed, epoch));
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += hyper.batch_size) {
      const std::size_t stop = std::min(n, start + hyper.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      rows.clear();
      for (auto r : idx) {
        auto x = data.row(r);
        rows.insert(rows.end(), x.begin(), x.end());
      }
      batch_loss_grad(net, act, std::span<const double>(rows.data(), idx.size() * d),
                      targets_for(data, idx), &g);
      for (std::size_t li = 0; li < net.layers.size(); ++li) step(net.layers[li], g.layers[li]);
      step(net.head, g.head);
    }
    result.epoch_loss.push_back(full_loss(net, act, data));
  }

  // Preserve the caller's entry order for both halves.
  auto trained = to_paramset(net.layers, &net.head);
  for (const auto& e : init) {
    if (e.name.starts_with("head.")) {
      result.head.add(e.name, trained.at(e.name));
    } else {
      result.backbone.add(e.name, trained.at(e.name));
    }
  }
  return result;
}

}  // namespace sotu
