#pragma once

// Operator network: attention-pooled set encoder (branch), coordinate trunk,
// nonlinear decoders for mean and spread, learned fundamental diagram and
// first-order propagation of the density spread to velocity.

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ontraffic/rng.hpp"
#include "ontraffic/scenario.hpp"
#include "ontraffic/tensor.hpp"

namespace ontraffic::net {

using pipeline::InputSet;
using pipeline::Query;

enum class Activation { kTanh, kRelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct ModelConfig {
  std::size_t d_enc = 64;
  std::size_t heads = 4;
  std::size_t head_width = 64;
  std::size_t p = 64;
  std::vector<std::size_t> coord_hidden{64, 64};
  std::vector<std::size_t> value_enc_hidden{64, 64};
  std::vector<std::size_t> score_hidden{64, 64};
  std::vector<std::size_t> head_value_hidden{64, 64};
  std::vector<std::size_t> phi_hidden{64, 64};
  std::vector<std::size_t> phi_sigma_hidden{64, 64};
  std::vector<std::size_t> trunk_hidden{64, 64};
  std::vector<std::size_t> nd_hidden{64, 64};
  std::vector<std::size_t> nd_sigma_hidden{64, 64};
  std::vector<std::size_t> fd_hidden{64, 64};
  Activation activation = Activation::kTanh;
  double sigma_floor = 1e-3;
  /// Replace ND / ND_sigma by the plain inner product sum(beta * tau).
  bool linear_decoder = false;
  /// tau and tau_sigma share the trunk body and split only the last layer.
  bool shared_trunk = true;
  /// Coordinate box mapped to [-1, 1]^2 before entering the networks.
  double x_min = 0.0;
  double x_max = 5.0;
  double t_min = -2.0;
  double t_max = 8.0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// d_enc = 8, H = 2, p = 8, one hidden layer of 8 everywhere.
  static ModelConfig tiny();
};

/// Fully connected layer y = x W + b with W of shape (in, out).
struct Dense {
  ad::Tensor w;
  std::optional<ad::Tensor> b;
};

/// Activation between layers; the last layer is linear.
struct Mlp {
  std::vector<Dense> layers;
  std::size_t in_dim() const { return layers.front().w.rows(); }
  std::size_t out_dim() const { return layers.back().w.cols(); }
};

struct ModelParams {
  ModelConfig config;
  Mlp coord_enc;                // Psi_c: 3 -> d_enc
  Mlp value_enc;                // Psi_v: 2 -> d_enc
  std::vector<Mlp> score;       // omega~ per head: d_enc -> 1 (no output bias)
  std::vector<Mlp> head_value;  // nu~ per head: d_enc -> head_width
  Mlp phi;                      // H * head_width -> p
  Mlp phi_sigma;
  Mlp trunk;        // 2 -> 2p when shared, else 2 -> p
  Mlp trunk_sigma;  // 2 -> p, only when not shared
  Mlp nd;           // p -> 1
  Mlp nd_sigma;     // p -> 1
  Mlp fd;           // 1 -> 1

  /// Glorot-uniform weights, zero biases.
  static ModelParams init(const ModelConfig& cfg, Rng& rng);

  /// Every tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, ad::Tensor*>> named();
  std::vector<std::pair<std::string, const ad::Tensor*>> named() const;
  std::size_t parameter_count() const;
};

struct PredictionField {
  std::vector<double> rho;
  std::vector<double> v;
  std::vector<double> sigma_rho;
  std::vector<double> sigma_v;
  std::size_t size() const { return rho.size(); }
};

/// Row order that sorts input rows lexicographically by (coords, values).
std::vector<std::size_t> canonical_order(const InputSet& input);

/// Distinct rows in canonical order with their multiplicities. Pooling over
/// distinct rows weighted by count equals pooling over all rows.
struct CanonicalRows {
  std::vector<std::size_t> index;
  std::vector<double> count;
};
CanonicalRows canonical_rows(const InputSet& input);

/// Network features of one input row: normalized (x, t), +1 probe / -1
/// control, and the raw (rho, v) values.
std::array<double, 3> coord_features(const ModelConfig& c, const std::array<double, 3>& coords);
std::array<double, 2> query_features(const ModelConfig& c, const Query& q);

/// Model parameters bound to a tape as differentiable leaves. All sub-network
/// evaluations are recorded on that tape.
class BoundModel {
 public:
  BoundModel(ad::Tape& tape, const ModelParams& params);

  /// psi = Psi_c(coords) + Psi_v(values) (m x d_enc), rows in input order.
  ad::Var encode(const InputSet& input);
  /// Same for the selected rows, in the order given.
  ad::Var encode(const InputSet& input, std::span<const std::size_t> rows);
  /// Concatenated per-head softmax-weighted values (1 x H * head_width).
  /// `counts` gives row multiplicities (all 1 when empty).
  ad::Var attention_pool(ad::Var psi, std::span<const double> counts = {});
  /// Per-head attention weights (m x 1 each).
  std::vector<ad::Var> attention_weights(ad::Var psi, std::span<const double> counts = {});
  std::pair<ad::Var, ad::Var> branch(const InputSet& input);
  std::pair<ad::Var, ad::Var> trunk(std::span<const Query> queries);
  /// Returns (rho_hat, sigma_rho), each N x 1.
  std::pair<ad::Var, ad::Var> decode(ad::Var beta, ad::Var tau, ad::Var beta_sigma, ad::Var tau_sigma);
  /// Returns (v_hat, dFD/drho), each N x 1; the derivative is itself on the
  /// tape (layer-wise chain rule).
  std::pair<ad::Var, ad::Var> fd_velocity(ad::Var rho);
  ad::Var propagate_uncertainty(ad::Var sigma_rho, ad::Var dfd);

  struct Outputs {
    ad::Var rho, v, sigma_rho, sigma_v;
  };
  Outputs forward(const InputSet& input, std::span<const Query> queries);

  /// Gradients of the last backward, aligned with ModelParams::named().
  std::vector<std::vector<double>> gradients() const;
  ad::Tape& tape() { return tape_; }

 private:
  struct BoundDense {
    ad::Var w;
    std::optional<ad::Var> b;
  };
  using BoundMlp = std::vector<BoundDense>;

  ad::Var apply(const BoundMlp& m, ad::Var x) const;
  const BoundMlp& mlp(std::size_t i) const { return mlps_[i]; }

  ad::Tape& tape_;
  const ModelParams& params_;
  std::vector<ad::Var> order_;  // same order as named()
  std::vector<BoundMlp> mlps_;  // same order as ModelParams traversal
};

/// Evaluates the branch once in double precision and the query side in
/// float32 with a vectorised tanh. Input rows are sorted canonically first,
/// so row order changes the result only through kernel rounding (~1e-16).
PredictionField predict(const ModelParams& params, const InputSet& input, std::span<const Query> queries);

/// Same composition entirely on the double-precision tape (reference path).
PredictionField predict_reference(const ModelParams& params, const InputSet& input, std::span<const Query> queries);

/// Branch coefficients (beta, beta_sigma) in double precision.
std::pair<std::vector<double>, std::vector<double>> branch_forward(const ModelParams& params, const InputSet& input);

// ---- checkpoints ----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelParams params;
  /// Free-form metadata (training config, epoch, metrics).
  std::string meta_json = "{}";
  /// Additional named tensors (e.g. optimizer moments).
  std::vector<std::pair<std::string, ad::Tensor>> extra;
};

/// "ONTC" | u32 version | u32 header length | JSON header | float32 data.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Rounds every parameter to float32 (the stored precision).
void round_to_stored_precision(ModelParams& params);

}  // namespace ontraffic::net
