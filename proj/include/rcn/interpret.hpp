#pragma once

// Post-hoc interpretation of a trained model.
//
// Region activation mapping: RAM(a,b) = sum_i w_i * exp(2 * S_i(a,b)),
// bilinearly resized to the image.
//
// Class-level region importance: for one support image, the meta weights
// against many same-class queries form a matrix W (queries x regions).
// All-zero columns are dropped. Column j gets mean mu_j and population
// deviation sigma_j; with a = mean_j sigma_j, the importance
//   I_j = integral over [mu_j - 2a, mu_j + 2a] of x N(x; mu_j, sigma_j) dx
// equals mu_j (2 Phi(2a / sigma_j) - 1) and tends to mu_j as sigma_j -> 0.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>

#include <json.hpp>

#include "rcn/image_io.hpp"
#include "rcn/model.hpp"

namespace rcn {

// ---- region activation mapping ---------------------------------------------------

template <class T>
struct RamMap {
    Tensor<T> values;     // h x w, before resizing
    Tensor<T> upsampled;  // H x W
};

template <class T>
RamMap<T> ram(const RegionWeight<T>& weight, const std::vector<RegionSimilarityMap<T>>& maps, std::size_t image_h,
              std::size_t image_w) {
    if (maps.empty()) throw std::invalid_argument("ram: no similarity maps");
    if (weight.values.size() != maps.size())
        throw ShapeError("ram: " + std::to_string(weight.values.size()) + " weights for " + std::to_string(maps.size()) +
                         " similarity maps");
    const Shape plane = maps.front().values.shape();
    std::vector<T> acc(numel(plane), T(0));
    for (std::size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].values.shape() != plane) throw ShapeError("ram: similarity maps differ in shape");
        const T w = weight.values[i];
        const auto s = maps[i].values.data();
        for (std::size_t a = 0; a < acc.size(); ++a) acc[a] += w * std::exp(T(2) * s[a]);
    }
    RamMap<T> out;
    out.values = Tensor<T>::from(plane, std::move(acc));
    out.upsampled = bilinear_upsample(out.values, image_h, image_w);
    return out;
}

// Min-max normalized jet overlay blended onto the base image. A constant
// map normalizes to 0 everywhere.
template <class T>
Image heatmap_overlay(const Tensor<T>& heat, const Image& base, double alpha = 0.5) {
    if (heat.rank() != 2 || heat.dim(0) != base.height || heat.dim(1) != base.width)
        throw ShapeError("heatmap: map " + shape_str(heat.shape()) + " does not match image " +
                         std::to_string(base.height) + "x" + std::to_string(base.width));
    const auto [lo_it, hi_it] = std::minmax_element(heat.data().begin(), heat.data().end());
    const double lo = *lo_it, range = double(*hi_it) - lo;
    Image out = base;
    if (out.channels == 1) {
        out.channels = 3;
        out.pixels.resize(3 * base.height * base.width);
        for (std::size_t c = 1; c < 3; ++c)
            std::copy_n(base.pixels.begin(), base.height * base.width,
                        out.pixels.begin() + static_cast<long>(c * base.height * base.width));
    }
    for (std::size_t y = 0; y < base.height; ++y)
        for (std::size_t x = 0; x < base.width; ++x) {
            const double v = range > 0 ? (heat[y * base.width + x] - lo) / range : 0.0;
            const double rgb[3] = {std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0),
                                   std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0),
                                   std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0)};
            for (std::size_t c = 0; c < 3; ++c)
                out.at(c, y, x) = static_cast<float>((1 - alpha) * out.at(c, y, x) + alpha * rgb[c]);
        }
    return out;
}

template <class T>
void export_heatmap(const RamMap<T>& map, const Image& base, const std::filesystem::path& path, double alpha = 0.5) {
    write_png(path, heatmap_overlay(map.upsampled, base, alpha));
}

// ---- class-level importance ---------------------------------------------------------

inline constexpr double kZeroWeight = 1e-12;

struct RegionWeightMatrix {
    std::vector<std::vector<double>> rows;  // one per query, surviving columns only
    std::vector<std::size_t> regions;       // original region index of each column
    std::size_t total_regions = 0;

    std::size_t columns() const { return regions.size(); }  // M
};

class DegenerateSupportError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Drops every column whose entries are all (numerically) zero.
inline RegionWeightMatrix build_weight_matrix(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("weight matrix: no rows");
    const std::size_t n = rows.front().size();
    RegionWeightMatrix m;
    m.total_regions = n;
    for (const auto& r : rows)
        if (r.size() != n) throw ShapeError("weight matrix: ragged rows");
    for (std::size_t j = 0; j < n; ++j) {
        bool zero = true;
        for (const auto& r : rows) zero = zero && std::abs(r[j]) < kZeroWeight;
        if (!zero) m.regions.push_back(j);
    }
    if (m.regions.empty())
        throw DegenerateSupportError("weight matrix: every region weight is zero for this support sample");
    for (const auto& r : rows) {
        std::vector<double> kept;
        for (std::size_t j : m.regions) kept.push_back(r[j]);
        m.rows.push_back(std::move(kept));
    }
    return m;
}

// Weights of one support sample against each query sample (inference mode).
template <class T>
RegionWeightMatrix region_weight_matrix(RcnModel<T>& model, const LabeledDataset& data, std::size_t support,
                                        const std::vector<std::size_t>& queries) {
    if (queries.size() < 2) throw std::invalid_argument("weight matrix: need at least 2 query samples");
    NoGradGuard guard;
    std::vector<EpisodeItem> q_items;
    for (std::size_t q : queries) q_items.push_back({q, 0});
    auto s_feat = model.features(stack_images<T>(data, {{support, 0}}), false);
    auto q_feat = model.features(stack_images<T>(data, q_items), false);
    const auto w = model.region_weights(s_feat, q_feat, false);
    const std::size_t n = model.regions();
    const bool shared = w.rank() == 1;
    std::vector<std::vector<double>> rows(queries.size(), std::vector<double>(n));
    for (std::size_t q = 0; q < queries.size(); ++q)
        for (std::size_t j = 0; j < n; ++j) rows[q][j] = w[(shared ? 0 : q * n) + j];
    return build_weight_matrix(rows);
}

inline double gaussian_pdf(double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace detail {
template <class F>
double simpson_step(const F& f, double a, double b, double fa, double fm, double fb, double whole, double tol,
                    int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
    const double flm = f(lm), frm = f(rm);
    const double left = (m - a) / 6 * (fa + 4 * flm + fm);
    const double right = (b - m) / 6 * (fm + 4 * frm + fb);
    const double delta = left + right - whole;
    if (depth <= 0 || std::abs(delta) <= 15 * tol) return left + right + delta / 15;
    return simpson_step(f, a, m, fa, flm, fm, left, tol / 2, depth - 1) +
           simpson_step(f, m, b, fm, frm, fb, right, tol / 2, depth - 1);
}
}  // namespace detail

// Adaptive Simpson quadrature on [a, b].
template <class F>
double adaptive_simpson(const F& f, double a, double b, double tol = 1e-9, int max_depth = 60) {
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    const double whole = (b - a) / 6 * (fa + 4 * fm + fb);
    return detail::simpson_step(f, a, b, fa, fm, fb, whole, tol, max_depth);
}

// Truncated expectation over [mu - 2a, mu + 2a] by quadrature. sigma = 0 gives mu.
inline double importance_indicator(double mu, double sigma, double a, double tol = 1e-9) {
    if (sigma <= 0.0) return mu;
    auto f = [&](double x) { return x * gaussian_pdf(x, mu, sigma); };
    // split at the mean, where the density peaks
    return adaptive_simpson(f, mu - 2 * a, mu, tol / 2) + adaptive_simpson(f, mu, mu + 2 * a, tol / 2);
}

inline double importance_closed_form(double mu, double sigma, double a) {
    if (sigma <= 0.0) return mu;
    return mu * (2.0 * normal_cdf(2.0 * a / sigma) - 1.0);
}

struct RegionImportance {
    std::size_t region = 0;  // original region index
    double mean = 0, stddev = 0, importance = 0;
};

struct ImportanceReport {
    std::vector<RegionImportance> regions;  // surviving columns, in region order
    double shared_deviation = 0;            // a
    std::vector<std::size_t> ascending;     // region indices by increasing I
    std::vector<std::size_t> descending;    // region indices by decreasing I

    std::size_t top_region() const { return descending.front(); }

    nlohmann::json to_json() const {
        nlohmann::json regs = nlohmann::json::array();
        for (std::size_t k = 0; k < regions.size(); ++k) {
            const auto& r = regions[k];
            const auto pos = std::find(descending.begin(), descending.end(), r.region) - descending.begin();
            regs.push_back({{"region", r.region}, {"mu", r.mean}, {"sigma", r.stddev}, {"importance", r.importance},
                            {"rank", pos + 1}});
        }
        return {{"a", shared_deviation},
                {"regions", regs},
                {"ranking_ascending", ascending},
                {"ranking_descending", descending},
                {"rank_convention", "rank 1 = largest importance"}};
    }
};

inline ImportanceReport importance(const RegionWeightMatrix& m) {
    if (m.rows.size() < 2) throw std::invalid_argument("importance: every column needs at least 2 entries");
    ImportanceReport rep;
    const double n = static_cast<double>(m.rows.size());
    for (std::size_t j = 0; j < m.columns(); ++j) {
        double mu = 0;
        for (const auto& r : m.rows) mu += r[j];
        mu /= n;
        double ss = 0;
        for (const auto& r : m.rows) ss += (r[j] - mu) * (r[j] - mu);
        rep.regions.push_back({m.regions[j], mu, std::sqrt(ss / n), 0.0});
    }
    double a = 0;
    for (const auto& r : rep.regions) a += r.stddev;
    a /= static_cast<double>(rep.regions.size());
    rep.shared_deviation = a;
    for (auto& r : rep.regions) r.importance = importance_indicator(r.mean, r.stddev, a);

    std::vector<std::size_t> order(rep.regions.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return rep.regions[x].importance < rep.regions[y].importance; });
    for (std::size_t k : order) rep.ascending.push_back(rep.regions[k].region);
    rep.descending.assign(rep.ascending.rbegin(), rep.ascending.rend());
    return rep;
}

// Pixel box covered by region `index` of an h x w grid laid over an H x W image.
inline Box region_box(std::size_t index, std::size_t h, std::size_t w, std::size_t image_h, std::size_t image_w) {
    const std::size_t r = index / w, c = index % w;
    return {static_cast<int>(c * image_w / w), static_cast<int>(r * image_h / h),
            static_cast<int>(((c + 1) * image_w + w - 1) / w), static_cast<int>(((r + 1) * image_h + h - 1) / h)};
}

template <class T>
struct PairExplanation {
    RegionWeight<T> weight;
    MatchResult<T> match;
    RamMap<T> map;
    double similarity = 0;
};

// RAM of one (support, query) pair of dataset samples, in inference mode.
template <class T>
PairExplanation<T> explain_pair(RcnModel<T>& model, const LabeledDataset& data, std::size_t support,
                                std::size_t query) {
    if (support >= data.samples.size() || query >= data.samples.size())
        throw std::invalid_argument("explain: sample index out of range");
    NoGradGuard guard;
    auto feats = model.features(stack_images<T>(data, {{support, 0}, {query, 0}}), false);
    const auto& bb = model.config().backbone;
    const Shape cell{bb.channels, bb.out_h, bb.out_w};
    FeatureMap<T> fs{slice_rows(feats, 0, 1).reshape(cell), support};
    FeatureMap<T> fq{slice_rows(feats, 1, 2).reshape(cell), query};
    PairExplanation<T> out;
    out.match = match(fs, fq, model.config().metric);
    auto w = model.region_weights(slice_rows(feats, 0, 1), slice_rows(feats, 1, 2), false);
    out.weight = {w.reshape({model.regions()}), model.config().head};
    out.similarity = combine(out.weight, out.match.scores).value.item();
    out.map = ram(out.weight, out.match.maps, data.height, data.width);
    return out;
}

struct Generalization {
    std::size_t support = 0;
    std::vector<std::size_t> queries;
    RegionWeightMatrix matrix;
    ImportanceReport report;
    Box top_box;                        // pixels covered by the top region
    std::optional<bool> overlaps_part;  // set when the support sample has a ground-truth part
};

// Importance of every region of one support sample, measured against all
// other samples of its class.
template <class T>
Generalization generalize(RcnModel<T>& model, const LabeledDataset& data, std::size_t support) {
    if (support >= data.samples.size()) throw std::invalid_argument("generalize: sample index out of range");
    Generalization g;
    g.support = support;
    const std::size_t cls = data.samples[support].label;
    for (std::size_t i = 0; i < data.samples.size(); ++i)
        if (i != support && data.samples[i].label == cls) g.queries.push_back(i);
    g.matrix = region_weight_matrix(model, data, support, g.queries);
    g.report = importance(g.matrix);
    const auto& bb = model.config().backbone;
    g.top_box = region_box(g.report.top_region(), bb.out_h, bb.out_w, data.height, data.width);
    if (const auto& part = data.samples[support].part_box) g.overlaps_part = g.top_box.overlaps(*part);
    return g;
}

// Region importance painted cell by cell onto the image, with the top region outlined.
inline Image importance_overlay(const ImportanceReport& rep, std::size_t h, std::size_t w, const Image& base) {
    std::vector<double> cell(h * w, 0.0);
    for (const auto& r : rep.regions) cell[r.region] = std::max(0.0, r.importance);
    std::vector<double> heat(base.height * base.width);
    for (std::size_t y = 0; y < base.height; ++y)
        for (std::size_t x = 0; x < base.width; ++x) heat[y * base.width + x] = cell[(y * h / base.height) * w + x * w / base.width];
    auto out = heatmap_overlay(Tensor<double>::from({base.height, base.width}, heat), base, 0.45);
    const Box b = region_box(rep.top_region(), h, w, base.height, base.width);
    for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
            if (y == b.y0 || y == b.y1 - 1 || x == b.x0 || x == b.x1 - 1) {
                out.at(0, y, x) = 1.f;
                out.at(1, y, x) = 1.f;
                out.at(2, y, x) = 1.f;
            }
    return out;
}

}  // namespace rcn
