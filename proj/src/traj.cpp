#include "trajmoe/traj.hpp"


#include "trajmoe/geo.hpp"
#include <algorithm>

namespace trajmoe {

namespace {

constexpr std::int64_t kDay = 86400;
constexpr std::int64_t kHalfHour = 1800;

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

std::int64_t euclid_mod(std::int64_t a, std::int64_t b) {
    std::int64_t r = a % b;
    return r < 0 ? r + b : r;
}

}  // namespace

std::vector<TemporalFeatures> temporal_features(const std::vector<std::int64_t>& times) {
    for (std::size_t i = 1; i < times.size(); ++i)
        if (times[i] <= times[i - 1])
            throw std::invalid_argument("temporal_features: arrival times must be strictly "
                                        "increasing (index " + std::to_string(i) + ")");
    std::vector<TemporalFeatures> out(times.size());
    for (std::size_t i = 0; i < times.size(); ++i) {
        const std::int64_t sod = euclid_mod(times[i], kDay);
        out[i].tod = static_cast<int>(((sod + kHalfHour / 2) / kHalfHour) % kTodSlots);
        // 1970-01-01 was a Thursday; 0 = Monday.
        out[i].dow = static_cast<int>(euclid_mod(floor_div(times[i], kDay) + 3, 7));
        if (i + 1 < times.size()) {
            const std::int64_t gap = times[i + 1] - times[i];
            out[i].stay_bucket =
                static_cast<int>(std::min<std::int64_t>(gap / kHalfHour, kStayBuckets - 1));
        } else {
            out[i].stay_bucket = 0;
        }
    }
    return out;
}

FoundationalSteps build_foundational(const Trajectory& traj, const City& city) {
    if (!city.featurized())
        throw std::invalid_argument("build_foundational: city has not been featurized");
    const int len = traj.length();
    FoundationalSteps f;
    f.poi.resize(len, city.poi_features.cols());
    f.coords.resize(len, 2);
    f.ranks.resize(len);
    for (int i = 0; i < len; ++i) {
        const int loc = traj.steps[i].location;
        if (loc < 0 || loc >= city.size())
            throw std::out_of_range("build_foundational: location id " + std::to_string(loc) +
                                    " not in city " + std::to_string(city.city_id));
        f.poi.row(i) = city.poi_features.row(loc);
        f.coords.row(i) = city.coords_norm.row(loc);
        f.ranks[i] = city.ranks[loc];
    }
    return f;
}

Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> causal_mask(int seq) {
    if (seq < 1) throw std::invalid_argument("causal_mask: length must be >= 1");
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> m(seq, seq);
    for (int i = 0; i < seq; ++i)
        for (int j = 0; j < seq; ++j) m(i, j) = j <= i ? 1 : 0;
    return m;
}

PaddedBatch pad_batch(const std::vector<Trajectory>& trajs, const City& city, int seq) {
    if (trajs.empty()) throw std::invalid_argument("pad_batch: empty batch");
    const int batch = static_cast<int>(trajs.size());
    const Index m = static_cast<Index>(batch) * seq;

    PaddedBatch out;
    out.batch = batch;
    out.seq = seq;
    out.city_id = city.city_id;
    out.poi_tokens = Matrix::Zero(m, city.poi_features.cols());
    out.coord_tokens = Matrix::Zero(m, 2);
    out.rank_tokens.assign(m, 1);
    out.tod.assign(m, 0);
    out.dow.assign(m, 0);
    out.stay.assign(m, 0);
    out.mask = BatchMask{batch, seq, std::vector<std::uint8_t>(m, 0)};
    out.targets.assign(m, 0);
    out.valid_target.assign(m, 0);

    for (int b = 0; b < batch; ++b) {
        const Trajectory& tr = trajs[b];
        const int len = tr.length();
        if (len < 2 || len > seq)
            throw std::invalid_argument("pad_batch: trajectory length " + std::to_string(len) +
                                        " outside [2, " + std::to_string(seq) + "]");
        if (tr.city_id != city.city_id)
            throw std::invalid_argument("pad_batch: trajectory from city " +
                                        std::to_string(tr.city_id) + " batched against city " +
                                        std::to_string(city.city_id));
        const FoundationalSteps f = build_foundational(tr, city);
        std::vector<std::int64_t> times(len);
        for (int t = 0; t < len; ++t) times[t] = tr.steps[t].time;
        const auto temporal = temporal_features(times);
        for (int t = 0; t < len; ++t) {
            const Index r = static_cast<Index>(b) * seq + t;
            out.poi_tokens.row(r) = f.poi.row(t);
            out.coord_tokens.row(r) = f.coords.row(t);
            out.rank_tokens[r] = f.ranks[t];
            out.tod[r] = temporal[t].tod;
            out.dow[r] = temporal[t].dow;
            out.stay[r] = temporal[t].stay_bucket;
            out.mask.real[r] = 1;
            if (t + 1 < len) {
                out.targets[r] = tr.steps[t + 1].location;
                out.valid_target[r] = 1;
            }
        }
    }
    return out;
}

StreamEmbedParams StreamEmbedParams::create(ParamStore& store, const StreamEmbedConfig& cfg,
                                            const std::string& prefix) {
    StreamEmbedParams p;
    p.poi_w = &store.create(prefix + ".poi.w", 2 * cfg.poi_categories, cfg.dim);
    p.poi_b = &store.create(prefix + ".poi.b", 1, cfg.dim);
    p.pos_w = &store.create(prefix + ".pos.w", 2, cfg.dim);
    p.pos_b = &store.create(prefix + ".pos.b", 1, cfg.dim);
    p.pop_table = &store.create(prefix + ".pop.e", kRankBuckets, cfg.dim);
    p.tod_table = &store.create(prefix + ".tod.e", kTodSlots, cfg.dim);
    p.dow_table = &store.create(prefix + ".dow.e", kDowDays, cfg.dim);
    p.stay_table = &store.create(prefix + ".stay.e", kStayBuckets, cfg.dim);
    return p;
}

StreamEmbeddings embed_streams(Tape& tape, const PaddedBatch& batch,
                               const StreamEmbedParams& params) {
    const Index m = batch.poi_tokens.rows();
    Matrix mask_col(m, 1);
    for (Index i = 0; i < m; ++i) mask_col(i, 0) = batch.mask.real[i] ? 1.0 : 0.0;
    Var mask = tape.constant(std::move(mask_col));

    std::vector<int> rank_rows(m), tod(batch.tod), dow(batch.dow), stay(batch.stay);
    for (Index i = 0; i < m; ++i) {
        const int r = batch.rank_tokens[i];
        if (r < 1 || r > kRankBuckets)
            throw std::out_of_range("embed_streams: rank bucket " + std::to_string(r) +
                                    " outside [1, " + std::to_string(kRankBuckets) + "]");
        rank_rows[i] = r - 1;
    }

    StreamEmbeddings e;
    e.poi = row_scale(affine(tape.constant(batch.poi_tokens), tape.use(*params.poi_w),
                             tape.use(*params.poi_b)),
                      mask);
    e.pos = row_scale(affine(tape.constant(batch.coord_tokens), tape.use(*params.pos_w),
                             tape.use(*params.pos_b)),
                      mask);
    e.pop = row_scale(rows_lookup(tape.use(*params.pop_table), std::move(rank_rows)), mask);
    e.traj = add(add(e.poi, e.pos), e.pop);
    Var ts = add(add(rows_lookup(tape.use(*params.tod_table), std::move(tod)),
                     rows_lookup(tape.use(*params.dow_table), std::move(dow))),
                 rows_lookup(tape.use(*params.stay_table), std::move(stay)));
    e.ts = row_scale(ts, mask);
    return e;
}

}  // namespace trajmoe
