#include "trajmoe/samoe.hpp"

#include <cmath>

namespace trajmoe {

const char* to_string(AblationVariant v) {
    switch (v) {
        case AblationVariant::Full: return "full";
        case AblationVariant::RemoveAdaptedGate: return "remove_adapted_gate";
        case AblationVariant::RemoveTimeGate: return "remove_time_gate";
        case AblationVariant::RemoveTrajGate: return "remove_traj_gate";
        case AblationVariant::RemoveMoeKeepFused: return "remove_moe_keep_fused";
        case AblationVariant::RemoveFusedExpert: return "remove_fused_expert";
    }
    return "?";
}

AblationVariant ablation_from_string(const std::string& s) {
    for (AblationVariant v :
         {AblationVariant::Full, AblationVariant::RemoveAdaptedGate,
          AblationVariant::RemoveTimeGate, AblationVariant::RemoveTrajGate,
          AblationVariant::RemoveMoeKeepFused, AblationVariant::RemoveFusedExpert})
        if (s == to_string(v)) return v;
    throw std::invalid_argument("unknown ablation variant: " + s);
}

AblationFlags AblationFlags::from_variant(AblationVariant v) {
    AblationFlags f;
    switch (v) {
        case AblationVariant::Full: break;
        case AblationVariant::RemoveAdaptedGate: f.adapted_gate = false; break;
        case AblationVariant::RemoveTimeGate: f.time_gate = false; break;
        case AblationVariant::RemoveTrajGate: f.traj_gate = false; break;
        case AblationVariant::RemoveMoeKeepFused:
            f.specialized_experts = false;
            f.adapted_gate = f.time_gate = f.traj_gate = false;
            break;
        case AblationVariant::RemoveFusedExpert: f.fused_expert = false; break;
    }
    f.validate();
    return f;
}

void AblationFlags::validate() const {
    if (!specialized_experts && !fused_expert)
        throw std::invalid_argument(
            "ablation: removing both the MoE and the fused expert leaves no fused stream");
    if (specialized_experts && !time_gate && !traj_gate)
        throw std::invalid_argument("ablation: specialized experts need at least one gate");
}

AttentionParams AttentionParams::create(ParamStore& store, int dim, const std::string& prefix) {
    AttentionParams p;
    p.wq = &store.create(prefix + ".wq", dim, dim);
    p.bq = &store.create(prefix + ".bq", 1, dim);
    p.wk = &store.create(prefix + ".wk", dim, dim);
    p.bk = &store.create(prefix + ".bk", 1, dim);
    p.wv = &store.create(prefix + ".wv", dim, dim);
    p.bv = &store.create(prefix + ".bv", 1, dim);
    p.wo = &store.create(prefix + ".wo", dim, dim);
    p.bo = &store.create(prefix + ".bo", 1, dim);
    p.ln_g = &store.create(prefix + ".ln_g", 1, dim);
    p.ln_b = &store.create(prefix + ".ln_b", 1, dim);
    return p;
}

ExpertParams ExpertParams::create(ParamStore& store, int dim, const std::string& prefix) {
    ExpertParams p;
    p.w1 = &store.create(prefix + ".w1", dim, 2 * dim);
    p.b1 = &store.create(prefix + ".b1", 1, 2 * dim);
    p.w2 = &store.create(prefix + ".w2", 2 * dim, dim);
    p.b2 = &store.create(prefix + ".b2", 1, dim);
    return p;
}

GateParams GateParams::create(ParamStore& store, int in_dim, int out_dim,
                              const std::string& prefix) {
    GateParams p;
    p.w = &store.create(prefix + ".w", in_dim, out_dim);
    p.b = &store.create(prefix + ".b", 1, out_dim);
    return p;
}

SamoeParams SamoeParams::create(ParamStore& store, const SamoeConfig& cfg,
                                const std::string& prefix) {
    cfg.ablation.validate();
    if (cfg.heads <= 0 || cfg.dim % cfg.heads != 0)
        throw std::invalid_argument("samoe: head count " + std::to_string(cfg.heads) +
                                    " must divide model dimension " + std::to_string(cfg.dim));
    static const char* stream_names[kNumStreams] = {"poi", "pos", "pop", "traj"};
    SamoeParams params;
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = prefix + "." + std::to_string(l);
        SamoeLayerParams layer;
        if (cfg.share_stream_attention) {
            layer.att.push_back(AttentionParams::create(store, cfg.dim, base + ".att.shared"));
        } else {
            for (int s = 0; s < kNumStreams; ++s)
                layer.att.push_back(
                    AttentionParams::create(store, cfg.dim, base + ".att." + stream_names[s]));
        }
        if (cfg.ablation.specialized_experts) {
            for (int s = 0; s < kNumSpecialized; ++s)
                layer.expert[s] =
                    ExpertParams::create(store, cfg.dim, base + ".expert." + stream_names[s]);
            if (cfg.ablation.traj_gate)
                layer.traj_gate =
                    GateParams::create(store, cfg.dim, kNumSpecialized, base + ".gate.traj");
            if (cfg.ablation.time_gate)
                layer.time_gate =
                    GateParams::create(store, cfg.dim, kNumSpecialized, base + ".gate.time");
            if (cfg.ablation.router_active())
                layer.adapted = GateParams::create(store, 2 * cfg.dim, 2, base + ".router");
        }
        if (cfg.ablation.fused_expert)
            layer.expert_fused = ExpertParams::create(store, cfg.dim, base + ".expert.fused");
        params.layers.push_back(std::move(layer));
    }
    return params;
}

Var attention_block(Tape& tape, Var x, const AttentionParams& p, int heads,
                    const BatchMask& mask) {
    Var q = affine(x, tape.use(*p.wq), tape.use(*p.bq));
    Var k = affine(x, tape.use(*p.wk), tape.use(*p.bk));
    Var v = affine(x, tape.use(*p.wv), tape.use(*p.bv));
    Var ctx = masked_attention_core(q, k, v, heads, mask);
    Var o = affine(ctx, tape.use(*p.wo), tape.use(*p.bo));
    return layer_norm(add(x, o), tape.use(*p.ln_g), tape.use(*p.ln_b));
}

Var expert_ffn(Tape& tape, Var x, const ExpertParams& p) {
    Var h = gelu(affine(x, tape.use(*p.w1), tape.use(*p.b1)));
    return add(x, affine(h, tape.use(*p.w2), tape.use(*p.b2)));
}

Var route_mix(Var w_traj, Var w_time, Var s, RoutingMode mode) {
    check_same_shape(w_traj.value(), w_time.value(), "route_mix gates");
    if (s.rows() != w_traj.rows() || s.cols() != 2)
        throw std::invalid_argument("route_mix: scores must be " + std::to_string(w_traj.rows()) +
                                    "x2, got " + shape_str(s.value()));
    const Index m = w_traj.rows();
    // sigmoid(s1 - s2) equals softmax([s1, s2])[0]; it is the surrogate
    // selector the backward pass differentiates in either mode.
    auto gtilde = std::make_shared<Eigen::ArrayXd>(m);
    Matrix out(m, w_traj.cols());
    for (Index i = 0; i < m; ++i) {
        const double diff = s.value()(i, 0) - s.value()(i, 1);
        (*gtilde)(i) = 1.0 / (1.0 + std::exp(-diff));
        const double coeff = mode == RoutingMode::Hard ? (diff >= 0.0 ? 1.0 : 0.0) : (*gtilde)(i);
        out.row(i) = coeff * w_traj.value().row(i) + (1.0 - coeff) * w_time.value().row(i);
    }
    bool req = w_traj.tape->requires_grad(w_traj) || w_traj.tape->requires_grad(w_time) ||
               w_traj.tape->requires_grad(s);
    return w_traj.tape->make(
        std::move(out), req, [w_traj, w_time, s, gtilde](Tape& t, const Matrix& g) {
            const Index n = g.rows();
            Matrix dwt(n, g.cols()), dww(n, g.cols()), ds = Matrix::Zero(n, 2);
            for (Index i = 0; i < n; ++i) {
                const double gt = (*gtilde)(i);
                dwt.row(i) = gt * g.row(i);
                dww.row(i) = (1.0 - gt) * g.row(i);
                const double a = g.row(i).dot(w_traj.value().row(i) - w_time.value().row(i));
                ds(i, 0) = a * gt * (1.0 - gt);
                ds(i, 1) = -ds(i, 0);
            }
            if (t.requires_grad(w_traj)) t.accumulate(w_traj, dwt);
            if (t.requires_grad(w_time)) t.accumulate(w_time, dww);
            if (t.requires_grad(s)) t.accumulate(s, ds);
        });
}

RouterDecision star_route(const SamoeLayerParams& layer, const Matrix& h_traj_row,
                          const Matrix& e_ts_row) {
    if (!layer.traj_gate.present() || !layer.time_gate.present() || !layer.adapted.present())
        throw std::invalid_argument("star_route: a routing component is absent in this "
                                    "configuration");
    RouterDecision d;
    Matrix wt = softmax(h_traj_row * layer.traj_gate.w->value + layer.traj_gate.b->value, 1);
    Matrix ww = softmax(e_ts_row * layer.time_gate.w->value + layer.time_gate.b->value, 1);
    Matrix cat(1, h_traj_row.cols() + e_ts_row.cols());
    cat << h_traj_row, e_ts_row;
    Matrix s = cat * layer.adapted.w->value + layer.adapted.b->value;
    for (int i = 0; i < 3; ++i) {
        d.w_traj[i] = wt(0, i);
        d.w_time[i] = ww(0, i);
    }
    d.s = {s(0, 0), s(0, 1)};
    d.g = s(0, 0) >= s(0, 1) ? 1 : 0;
    for (int i = 0; i < 3; ++i)
        d.weights[i] = d.g ? d.w_traj[i] : d.w_time[i];
    return d;
}

namespace {

void record_trace(GateTrace* trace, const PaddedBatch& batch, int layer_index, const Matrix* wt,
                  const Matrix* ww, const Matrix* s, const Matrix& weights) {
    if (!trace) return;
    for (int b = 0; b < batch.batch; ++b) {
        for (int t = 0; t < batch.seq; ++t) {
            const Index r = static_cast<Index>(b) * batch.seq + t;
            if (!batch.mask.real[r]) continue;
            GateRecord rec;
            rec.layer = layer_index;
            rec.b = b;
            rec.t = t;
            rec.tod = batch.tod[r];
            for (int i = 0; i < 3; ++i) {
                rec.decision.w_traj[i] = wt ? (*wt)(r, i) : 0.0;
                rec.decision.w_time[i] = ww ? (*ww)(r, i) : 0.0;
                rec.decision.weights[i] = weights(r, i);
            }
            if (s) {
                rec.decision.s = {(*s)(r, 0), (*s)(r, 1)};
                rec.decision.g = (*s)(r, 0) >= (*s)(r, 1) ? 1 : 0;
            } else {
                rec.decision.s = {0.0, 0.0};
                rec.decision.g = wt ? 1 : 0;
            }
            trace->records.push_back(rec);
        }
    }
}

}  // namespace

StreamsState samoe_block(Tape& tape, const StreamsState& attended, Var e_ts,
                         const SamoeLayerParams& layer, const SamoeConfig& cfg,
                         const PaddedBatch& batch, int layer_index, GateTrace* trace) {
    const AblationFlags& ab = cfg.ablation;
    StreamsState out;
    Var h_traj = attended.streams[kTraj];

    if (!ab.specialized_experts) {
        out.streams[kTraj] = expert_ffn(tape, h_traj, layer.expert_fused);
        return out;
    }

    Var experts[kNumSpecialized];
    for (int i = 0; i < kNumSpecialized; ++i) {
        experts[i] = expert_ffn(tape, attended.streams[i], layer.expert[i]);
        out.streams[i] = experts[i];
    }

    Var w_traj, w_time, weights;
    Matrix s_vals;  // copy; node storage may move as the tape grows
    bool have_s = false;
    if (ab.traj_gate)
        w_traj = softmax_rows(affine(h_traj, tape.use(*layer.traj_gate.w),
                                     tape.use(*layer.traj_gate.b)));
    if (ab.time_gate)
        w_time = softmax_rows(affine(e_ts, tape.use(*layer.time_gate.w),
                                     tape.use(*layer.time_gate.b)));
    if (ab.router_active()) {
        Var s = affine(concat_cols(h_traj, e_ts), tape.use(*layer.adapted.w),
                       tape.use(*layer.adapted.b));
        weights = route_mix(w_traj, w_time, s, cfg.routing);
        s_vals = s.value();
        have_s = true;
    } else if (ab.traj_gate) {
        weights = w_traj;
    } else {
        weights = w_time;
    }

    record_trace(trace, batch, layer_index, ab.traj_gate ? &w_traj.value() : nullptr,
                 ab.time_gate ? &w_time.value() : nullptr, have_s ? &s_vals : nullptr,
                 weights.value());

    Var fused;
    for (int i = 0; i < kNumSpecialized; ++i) {
        Var term = row_scale(experts[i], col_slice(weights, i, 1));
        fused = fused.valid() ? add(fused, term) : term;
    }
    if (ab.fused_expert) fused = add(expert_ffn(tape, h_traj, layer.expert_fused), fused);
    out.streams[kTraj] = fused;
    return out;
}

SamoeForwardOut samoe_forward(Tape& tape, const StreamEmbeddings& emb, const PaddedBatch& batch,
                              const SamoeParams& params, const SamoeConfig& cfg,
                              bool collect_trace) {
    cfg.ablation.validate();
    if (static_cast<int>(params.layers.size()) != cfg.layers)
        throw std::invalid_argument("samoe_forward: config expects " +
                                    std::to_string(cfg.layers) + " layers, params have " +
                                    std::to_string(params.layers.size()));
    const bool all_streams = cfg.ablation.specialized_experts;

    StreamsState state;
    state.streams[kTraj] = add(emb.traj, emb.ts);
    if (all_streams) {
        state.streams[kPoi] = add(emb.poi, emb.ts);
        state.streams[kPos] = add(emb.pos, emb.ts);
        state.streams[kPop] = add(emb.pop, emb.ts);
    }

    SamoeForwardOut out;
    for (int l = 0; l < cfg.layers; ++l) {
        const SamoeLayerParams& layer = params.layers[l];
        StreamsState attended;
        attended.streams[kTraj] = attention_block(tape, state.streams[kTraj],
                                                  layer.attention_for(kTraj, cfg), cfg.heads,
                                                  batch.mask);
        if (all_streams)
            for (int s = 0; s < kNumSpecialized; ++s)
                attended.streams[s] = attention_block(tape, state.streams[s],
                                                      layer.attention_for(s, cfg), cfg.heads,
                                                      batch.mask);
        state = samoe_block(tape, attended, emb.ts, layer, cfg, batch, l,
                            collect_trace ? &out.trace : nullptr);
    }
    out.h_traj = state.streams[kTraj];
    return out;
}

}  // namespace trajmoe
