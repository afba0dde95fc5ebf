#pragma once

#include <json.hpp>

#include "trajmoe/geo.hpp"
#include "trajmoe/samoe.hpp"
#include "trajmoe/traj.hpp"

namespace trajmoe {

struct ModelConfig {
    int dim = 64;
    int heads = 4;
    int layers = 2;
    int poi_categories = 8;
    int seq_len = 48;  // T, the padded trajectory length
    int cross_layers = 2;
    bool cross_matrix = false;
    bool share_stream_attention = false;
    RoutingMode routing = RoutingMode::Hard;
    AblationVariant ablation = AblationVariant::Full;

    GeoEncoderConfig geo() const {
        return GeoEncoderConfig{poi_categories, dim, cross_layers, cross_matrix};
    }
    StreamEmbedConfig emb() const { return StreamEmbedConfig{poi_categories, dim}; }
    SamoeConfig samoe() const {
        return SamoeConfig{dim,     heads,   layers, share_stream_attention,
                           routing, AblationFlags::from_variant(ablation)};
    }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// Candidate scores: row-wise dot products of trajectory states against the
// city's candidate matrix.
Var predict_logits(Var h_traj, Var candidates);

// The whole network: stream embeddings, SAMoE stack, candidate encoder,
// and the dot-product prediction head.
class Model {
  public:
    explicit Model(ModelConfig cfg);

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    // Param pointers reference ParamStore-owned allocations, so moves keep
    // every sub-structure valid.
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    // Seeded deterministic initialization (weights scaled by fan-in,
    // biases zero, layer-norm gains one).
    void init_params(std::uint64_t seed);

    struct ForwardOut {
        Var logits;      // (B*T) x N
        Var h_traj;      // (B*T) x d
        Var candidates;  // N x d
        GateTrace trace;
    };

    ForwardOut forward(Tape& tape, const PaddedBatch& batch, const City& city,
                       bool collect_trace = false);

    // Candidate matrix L for one city under the current parameters.
    Var candidates(Tape& tape, const City& city);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    Index param_count() const { return params_.total_size(); }

    const SamoeParams& samoe_params() const { return samoe_; }
    const StreamEmbedParams& emb_params() const { return emb_; }
    const GeoEncoderParams& geo_params() const { return geo_; }

  private:
    ModelConfig cfg_;
    ParamStore params_;
    StreamEmbedParams emb_;
    GeoEncoderParams geo_;
    SamoeParams samoe_;
};

}  // namespace trajmoe
