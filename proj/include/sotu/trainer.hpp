#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "sotu/dataset.hpp"
#include "sotu/tensor.hpp"

namespace sotu {

enum class Activation { relu, tanh };

Activation parse_activation(std::string_view s);
const char* to_string(Activation a) noexcept;

/// Feed-forward embedding network. Layer i maps dims[i] -> dims[i+1] with
/// dims = {input_dim, hidden_dims..., embed_dim}; the activation is applied
/// after every layer, including the embedding layer.
struct ModelSpec {
  std::size_t input_dim = 16;
  std::vector<std::size_t> hidden_dims{32};
  std::size_t embed_dim = 16;
  Activation activation = Activation::tanh;

  void validate() const;
};

struct Hyper {
  double learning_rate = 0.05;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

// Tensor naming: backbone layers are "layer{i}.w" [in,out] and "layer{i}.b"
// [out]; the classifier head is "head.w" [embed,classes] and "head.b" [classes].

/// Backbone only. Weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
/// biases zero.
ParamSet init_model(const ModelSpec& spec, std::uint64_t seed);
ParamSet init_head(std::size_t embed_dim, std::size_t num_classes, std::uint64_t seed);

/// Backbone entries followed by head entries.
ParamSet with_head(const ParamSet& backbone, const ParamSet& head);

struct SplitModel {
  ParamSet backbone;
  ParamSet head;
};
SplitModel split_head(const ParamSet& model);

/// Number of backbone layers; validates that layer shapes chain.
std::size_t backbone_depth(const ParamSet& model);
std::size_t backbone_input_dim(const ParamSet& model);
std::size_t backbone_embed_dim(const ParamSet& model);

std::vector<double> embed_forward(const ParamSet& backbone, Activation act,
                                  std::span<const double> x);
/// Row-major n x embed_dim embeddings of every dataset row.
std::vector<double> embed_batch(const ParamSet& backbone, Activation act,
                                std::span<const double> rows, std::size_t n);

struct LossGrad {
  double loss = 0.0;
  ParamSet grads;
};

/// Mean softmax cross-entropy of the head logits and its exact gradient
/// with respect to every tensor (backbone and head).
LossGrad loss_and_grad(const ParamSet& model, Activation act, const LabeledDataset& batch);

double head_accuracy(const ParamSet& model, Activation act, const LabeledDataset& data);

struct TrainResult {
  ParamSet backbone;
  /// Task head; only needed during fine-tuning and safe to discard.
  ParamSet head;
  /// Full-dataset mean loss after each epoch.
  std::vector<double> epoch_loss;
};

/// Mini-batch SGD on the combined backbone+head model. Each epoch visits
/// the rows in an order drawn from derive_seed(hyper.seed, epoch).
TrainResult train(const ParamSet& init, const LabeledDataset& data, const Hyper& hyper,
                  Activation act);

}  // namespace sotu
