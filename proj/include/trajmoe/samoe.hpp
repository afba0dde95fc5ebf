#pragma once

#include <array>
#include <string>
#include <vector>

#include "trajmoe/ops.hpp"
#include "trajmoe/traj.hpp"

namespace trajmoe {

// Hard selection is the model's contract; the soft mode mixes by the
// sigmoid surrogate instead and exists so the whole pipeline has an exact
// gradient for finite-difference verification.
enum class RoutingMode { Hard, Soft };

enum class AblationVariant {
    Full,
    RemoveAdaptedGate,
    RemoveTimeGate,
    RemoveTrajGate,
    RemoveMoeKeepFused,
    RemoveFusedExpert,
};

const char* to_string(AblationVariant v);
AblationVariant ablation_from_string(const std::string& s);

struct AblationFlags {
    bool adapted_gate = true;
    bool time_gate = true;
    bool traj_gate = true;
    bool specialized_experts = true;
    bool fused_expert = true;

    static AblationFlags from_variant(AblationVariant v);
    // Rejects combinations that leave the fused stream undefined.
    void validate() const;
    bool router_active() const { return adapted_gate && time_gate && traj_gate; }
};

struct SamoeConfig {
    int dim = 64;
    int heads = 4;
    int layers = 2;
    bool share_stream_attention = false;
    RoutingMode routing = RoutingMode::Hard;
    AblationFlags ablation;
};

enum Stream { kPoi = 0, kPos = 1, kPop = 2, kTraj = 3 };
constexpr int kNumStreams = 4;
constexpr int kNumSpecialized = 3;

// One routed position: gate outputs, adaptation scores, the hard selector,
// and the final expert weights.
struct RouterDecision {
    std::array<double, 3> w_traj{};
    std::array<double, 3> w_time{};
    std::array<double, 2> s{};
    int g = 1;
    std::array<double, 3> weights{};
};

struct GateRecord {
    int layer = 0;
    int b = 0;
    int t = 0;
    int tod = 0;
    RouterDecision decision;
};

// One record per real position per layer whenever routing is active.
struct GateTrace {
    std::vector<GateRecord> records;
};

struct AttentionParams {
    Param* wq = nullptr;
    Param* bq = nullptr;
    Param* wk = nullptr;
    Param* bk = nullptr;
    Param* wv = nullptr;
    Param* bv = nullptr;
    Param* wo = nullptr;
    Param* bo = nullptr;
    Param* ln_g = nullptr;
    Param* ln_b = nullptr;

    static AttentionParams create(ParamStore& store, int dim, const std::string& prefix);
};

struct ExpertParams {
    Param* w1 = nullptr;
    Param* b1 = nullptr;
    Param* w2 = nullptr;
    Param* b2 = nullptr;

    bool present() const { return w1 != nullptr; }
    static ExpertParams create(ParamStore& store, int dim, const std::string& prefix);
};

struct GateParams {
    Param* w = nullptr;
    Param* b = nullptr;

    bool present() const { return w != nullptr; }
    static GateParams create(ParamStore& store, int in_dim, int out_dim,
                             const std::string& prefix);
};

struct SamoeLayerParams {
    std::vector<AttentionParams> att;  // one per stream, or a single shared set
    ExpertParams expert[kNumSpecialized];
    ExpertParams expert_fused;
    GateParams traj_gate;
    GateParams time_gate;
    GateParams adapted;

    const AttentionParams& attention_for(int stream, const SamoeConfig& cfg) const {
        return att[cfg.share_stream_attention ? 0 : stream];
    }
};

struct SamoeParams {
    std::vector<SamoeLayerParams> layers;

    static SamoeParams create(ParamStore& store, const SamoeConfig& cfg,
                              const std::string& prefix = "layers");
};

// Masked multi-head attention followed by the residual connection and
// layer normalization.
Var attention_block(Tape& tape, Var x, const AttentionParams& p, int heads,
                    const BatchMask& mask);

// Two-layer FFN (hidden 2d, GELU) with a residual connection.
Var expert_ffn(Tape& tape, Var x, const ExpertParams& p);

// STAR weight selection over a whole batch of positions. In hard mode the
// forward pass picks w_traj when s1 >= s2 and w_time otherwise; the
// backward pass uses the straight-through surrogate sigmoid(s1 - s2) so the
// adaptation scores keep training.
Var route_mix(Var w_traj, Var w_time, Var s, RoutingMode mode);

// Single-position STAR evaluation (tape-free), matching the batched path.
RouterDecision star_route(const SamoeLayerParams& layer, const Matrix& h_traj_row,
                          const Matrix& e_ts_row);

struct StreamsState {
    Var streams[kNumStreams];
};

// Post-attention SAMoE block: specialized experts per foundational stream,
// STAR weights per position, and the fused-stream update. Appends one gate
// record per real position when `trace` is given.
StreamsState samoe_block(Tape& tape, const StreamsState& attended, Var e_ts,
                         const SamoeLayerParams& layer, const SamoeConfig& cfg,
                         const PaddedBatch& batch, int layer_index, GateTrace* trace);

struct SamoeForwardOut {
    Var h_traj;
    GateTrace trace;
};

// Full stack: E_ts joins every stream at layer 0, each layer runs masked
// attention per stream and then the SAMoE block, and the foundational
// streams carry their expert outputs to the next layer.
SamoeForwardOut samoe_forward(Tape& tape, const StreamEmbeddings& emb, const PaddedBatch& batch,
                              const SamoeParams& params, const SamoeConfig& cfg,
                              bool collect_trace = false);

}  // namespace trajmoe
