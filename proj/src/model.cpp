#include "trajmoe/model.hpp"

#include <json.hpp>

#include "trajmoe/rng.hpp"

namespace trajmoe {

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"dim", dim},
                          {"heads", heads},
                          {"layers", layers},
                          {"poi_categories", poi_categories},
                          {"seq_len", seq_len},
                          {"cross_layers", cross_layers},
                          {"cross_matrix", cross_matrix},
                          {"share_stream_attention", share_stream_attention},
                          {"routing", routing == RoutingMode::Hard ? "hard" : "soft"},
                          {"ablation", to_string(ablation)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.dim = j.at("dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.layers = j.at("layers").get<int>();
    c.poi_categories = j.at("poi_categories").get<int>();
    c.seq_len = j.at("seq_len").get<int>();
    c.cross_layers = j.at("cross_layers").get<int>();
    c.cross_matrix = j.at("cross_matrix").get<bool>();
    c.share_stream_attention = j.at("share_stream_attention").get<bool>();
    c.routing = j.at("routing").get<std::string>() == "soft" ? RoutingMode::Soft
                                                             : RoutingMode::Hard;
    c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    return c;
}

Var predict_logits(Var h_traj, Var candidates) {
    if (h_traj.cols() != candidates.cols())
        throw std::invalid_argument("predict_logits: state dimension " +
                                    std::to_string(h_traj.cols()) +
                                    " does not match candidate dimension " +
                                    std::to_string(candidates.cols()));
    return matmul_nt(h_traj, candidates);
}

Model::Model(ModelConfig cfg) : cfg_(cfg) {
    cfg_.samoe().ablation.validate();
    emb_ = StreamEmbedParams::create(params_, cfg_.emb());
    geo_ = GeoEncoderParams::create(params_, cfg_.geo());
    samoe_ = SamoeParams::create(params_, cfg_.samoe());
}

void Model::init_params(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "model-init"));
    for (auto& p : params_) {
        const std::string& n = p->name;
        const bool is_ln_gain = n.ends_with(".ln_g");
        const bool is_bias = n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2") ||
                             n.ends_with(".bq") || n.ends_with(".bk") || n.ends_with(".bv") ||
                             n.ends_with(".bo") || n.ends_with(".ln_b");
        const bool is_table = n.ends_with(".e");
        if (is_ln_gain) {
            p->value.setOnes();
        } else if (is_bias) {
            p->value.setZero();
        } else if (is_table) {
            for (Index i = 0; i < p->value.size(); ++i)
                p->value.data()[i] = 0.1 * rng.normal();
        } else if (n.starts_with("geo.cross") && n.ends_with(".w")) {
            // cross layers start as the identity; the gate learns from zero
            p->value.setZero();
        } else {
            // raw POI counts make the candidate encoder inputs large, so the
            // final projection starts small to keep initial logits near zero
            double sd = 1.0 / std::sqrt(static_cast<double>(p->value.rows()));
            if (n == "geo.out.w") sd *= 0.01;
            for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = sd * rng.normal();
        }
    }
}

Var Model::candidates(Tape& tape, const City& city) {
    return encode_candidates(tape, city, geo_, cfg_.geo());
}

Model::ForwardOut Model::forward(Tape& tape, const PaddedBatch& batch, const City& city,
                                 bool collect_trace) {
    if (batch.city_id != city.city_id)
        throw std::invalid_argument("forward: batch from city " + std::to_string(batch.city_id) +
                                    " scored against city " + std::to_string(city.city_id) +
                                    " candidates");
    ForwardOut out;
    StreamEmbeddings emb = embed_streams(tape, batch, emb_);
    SamoeForwardOut stack = samoe_forward(tape, emb, batch, samoe_, cfg_.samoe(), collect_trace);
    out.h_traj = stack.h_traj;
    out.trace = std::move(stack.trace);
    out.candidates = candidates(tape, city);
    out.logits = predict_logits(out.h_traj, out.candidates);
    return out;
}

}  // namespace trajmoe
