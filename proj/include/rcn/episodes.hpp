#pragma once

// Datasets, class-disjoint splits, N-way K-shot episode sampling, query-side
// augmentation and the procedural dataset used for desk-scale runs.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcn/image_io.hpp"
#include "rcn/tensor.hpp"

namespace rcn {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "' (expected train|val|test)");
}

// SplitMix64 finalizer; derives independent stream seeds from (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int area() const { return std::max(0, x1 - x0) * std::max(0, y1 - y0); }
    bool overlaps(const Box& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
    bool operator==(const Box&) const = default;
};

struct Sample {
    Image image;
    std::size_t label = 0;
    std::optional<Box> part_box;  // ground-truth distinctive part, synthetic data only
};

struct LabeledDataset {
    std::size_t channels = 3, height = 0, width = 0;
    std::vector<std::string> class_names;
    std::vector<Split> class_split;  // indexed by class id
    std::vector<Sample> samples;

    std::size_t class_count() const { return class_names.size(); }

    std::vector<std::size_t> classes_in(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < class_split.size(); ++c)
            if (class_split[c] == s) out.push_back(c);
        return out;
    }

    // Sample indices per class id.
    std::vector<std::vector<std::size_t>> by_class() const {
        std::vector<std::vector<std::size_t>> out(class_count());
        for (std::size_t i = 0; i < samples.size(); ++i) out[samples[i].label].push_back(i);
        return out;
    }

    void validate() const {
        if (class_split.size() != class_names.size()) throw std::invalid_argument("dataset: every class needs a split");
        for (const auto& s : samples) {
            if (s.label >= class_count()) throw std::invalid_argument("dataset: label out of range");
            if (s.image.channels != channels || s.image.height != height || s.image.width != width)
                throw std::invalid_argument("dataset: image sizes differ");
        }
    }
};

struct EpisodeItem {
    std::size_t sample = 0;  // index into the dataset
    std::size_t label = 0;   // episode-local label in [0, way)
};

struct Episode {
    std::size_t way = 0, shot = 0, queries = 0;
    std::vector<EpisodeItem> support;  // way*shot, grouped by label
    std::vector<EpisodeItem> query;    // way*queries, grouped by label
    std::vector<std::size_t> classes;  // episode label -> dataset class id
};

class EpisodeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// Draws `way` classes from the split, then K support and B query samples per
// class without overlap. Fully determined by rng.
inline Episode sample_episode(const LabeledDataset& data, Split split, std::size_t way, std::size_t shot,
                              std::size_t queries, std::mt19937_64& rng) {
    if (way == 0 || shot == 0 || queries == 0) throw EpisodeError("episode: way, shot and queries must be positive");
    auto pool = data.classes_in(split);
    if (pool.size() < way)
        throw EpisodeError("episode: split '" + to_string(split) + "' has " + std::to_string(pool.size()) +
                           " classes, need " + std::to_string(way));
    const auto members = data.by_class();
    // Partial Fisher-Yates over the class pool.
    for (std::size_t i = 0; i < way; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.queries = queries;
    std::vector<std::vector<std::size_t>> chosen(way);
    for (std::size_t label = 0; label < way; ++label) {
        const std::size_t cls = pool[label];
        auto idx = members[cls];
        if (idx.size() < shot + queries)
            throw EpisodeError("episode: class '" + data.class_names[cls] + "' has " + std::to_string(idx.size()) +
                               " samples, need " + std::to_string(shot + queries));
        for (std::size_t i = 0; i < shot + queries; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
            std::swap(idx[i], idx[pick(rng)]);
        }
        ep.classes.push_back(cls);
        chosen[label].assign(idx.begin(), idx.begin() + static_cast<long>(shot + queries));
    }
    for (std::size_t label = 0; label < way; ++label)
        for (std::size_t i = 0; i < shot; ++i) ep.support.push_back({chosen[label][i], label});
    for (std::size_t label = 0; label < way; ++label)
        for (std::size_t i = shot; i < shot + queries; ++i) ep.query.push_back({chosen[label][i], label});
    return ep;
}

// ---- augmentation ----------------------------------------------------------------

struct AugmentPolicy {
    bool enabled = true;
    double crop_probability = 0.5;
    double crop_min_scale = 0.75;  // fraction of side length kept
    double jitter_probability = 0.5;
    double brightness = 0.15;
    double contrast = 0.15;
    double flip_probability = 0.5;
    double erase_probability = 0.25;
    double erase_min_area = 0.02;
    double erase_max_area = 0.08;

    static AugmentPolicy disabled() {
        AugmentPolicy p;
        p.enabled = false;
        return p;
    }
};

inline Image hflip(const Image& img) {
    Image out = img;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

// Replaces the rectangle with a constant value.
inline Image erase(const Image& img, const Box& rect, float value) {
    Image out = img;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (int y = std::max(0, rect.y0); y < std::min<int>(rect.y1, static_cast<int>(img.height)); ++y)
            for (int x = std::max(0, rect.x0); x < std::min<int>(rect.x1, static_cast<int>(img.width)); ++x)
                out.at(c, y, x) = value;
    return out;
}

// Crops the rectangle and resamples it bilinearly back to full size.
inline Image resize_crop(const Image& img, const Box& rect) {
    Image out = img;
    const double sy = static_cast<double>(rect.y1 - rect.y0) / img.height;
    const double sx = static_cast<double>(rect.x1 - rect.x0) / img.width;
    for (std::size_t y = 0; y < img.height; ++y) {
        const double fy = std::clamp(rect.y0 + (y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
        const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, img.height - 1);
        const double ty = fy - y0;
        for (std::size_t x = 0; x < img.width; ++x) {
            const double fx = std::clamp(rect.x0 + (x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
            const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, img.width - 1);
            const double tx = fx - x0;
            for (std::size_t c = 0; c < img.channels; ++c)
                out.at(c, y, x) = static_cast<float>((1 - ty) * ((1 - tx) * img.at(c, y0, x0) + tx * img.at(c, y0, x1)) +
                                                     ty * ((1 - tx) * img.at(c, y1, x0) + tx * img.at(c, y1, x1)));
        }
    }
    return out;
}

inline Image color_jitter(const Image& img, double brightness, double contrast) {
    Image out = img;
    double mean = 0;
    for (float v : img.pixels) mean += v;
    mean /= static_cast<double>(img.pixels.size());
    for (auto& v : out.pixels) v = static_cast<float>((v - mean) * contrast + mean + brightness);
    return out;
}

inline void clamp_unit(Image& img) {
    for (auto& v : img.pixels) v = std::clamp(v, 0.f, 1.f);
}

// Random resize-crop, color jitter, horizontal flip and random erasing.
inline Image augment_query(const Image& img, std::mt19937_64& rng, const AugmentPolicy& policy) {
    if (!policy.enabled) return img;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image out = img;
    if (u(rng) < policy.crop_probability) {
        const double s = policy.crop_min_scale + (1.0 - policy.crop_min_scale) * u(rng);
        const int ch = std::max(1, static_cast<int>(std::lround(s * img.height)));
        const int cw = std::max(1, static_cast<int>(std::lround(s * img.width)));
        const int y0 = static_cast<int>(u(rng) * (img.height - ch + 1));
        const int x0 = static_cast<int>(u(rng) * (img.width - cw + 1));
        out = resize_crop(out, {x0, y0, x0 + cw, y0 + ch});
    }
    if (u(rng) < policy.jitter_probability) {
        const double b = (2 * u(rng) - 1) * policy.brightness;
        const double c = 1 + (2 * u(rng) - 1) * policy.contrast;
        out = color_jitter(out, b, c);
    }
    if (u(rng) < policy.flip_probability) out = hflip(out);
    if (u(rng) < policy.erase_probability) {
        const double area = policy.erase_min_area + (policy.erase_max_area - policy.erase_min_area) * u(rng);
        const double aspect = 0.5 + u(rng);
        const int eh = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect) * img.height)), 1,
                                  static_cast<int>(img.height));
        const int ew = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect) * img.width)), 1,
                                  static_cast<int>(img.width));
        const int y0 = static_cast<int>(u(rng) * (img.height - eh + 1));
        const int x0 = static_cast<int>(u(rng) * (img.width - ew + 1));
        out = erase(out, {x0, y0, x0 + ew, y0 + eh}, static_cast<float>(u(rng)));
    }
    clamp_unit(out);
    return out;
}

// ---- batching ------------------------------------------------------------------------

// Stacks the listed samples into an N x C x H x W tensor. When `augment` is
// set, each image passes through augment_query with its own derived stream.
template <class T>
Tensor<T> stack_images(const LabeledDataset& data, const std::vector<EpisodeItem>& items,
                       const AugmentPolicy* augment = nullptr, std::uint64_t augment_seed = 0) {
    const std::size_t plane = data.channels * data.height * data.width;
    std::vector<T> v(items.size() * plane);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const Image* img = &data.samples.at(items[i].sample).image;
        Image augmented;
        if (augment && augment->enabled) {
            std::mt19937_64 rng(derive_seed(augment_seed, i));
            augmented = augment_query(*img, rng, *augment);
            img = &augmented;
        }
        std::copy(img->pixels.begin(), img->pixels.end(), v.begin() + static_cast<long>(i * plane));
    }
    return Tensor<T>::from({items.size(), data.channels, data.height, data.width}, std::move(v));
}

// ---- synthetic data -------------------------------------------------------------------

// Every image shows a cluttered background, a large body blob and gray
// distractor marks shared by all classes. Class identity lives only in one
// small saturated part (shape x hue) placed at a random position, whose box
// is recorded as ground truth.
struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t images_per_class = 40;
    std::size_t image_size = 32;
    std::size_t part_size = 10;
    std::size_t distractors = 2;
    double train_fraction = 0.6;
    double val_fraction = 0.2;
    double color_jitter = 0.08;
    double noise = 0.03;
    std::uint64_t seed = 7;
};

inline constexpr std::size_t kPartShapes = 8;
inline constexpr std::size_t kPartHues = 8;

// Membership of normalized coordinates (u, v in [-1, 1]) in part shape k.
inline bool part_shape_mask(std::size_t shape, double u, double v) {
    const double r = std::sqrt(u * u + v * v);
    switch (shape) {
        case 0: return true;                                            // square
        case 1: return r <= 1.0;                                        // disk
        case 2: return r <= 1.0 && r >= 0.55;                           // ring
        case 3: return v >= -0.9 && std::abs(u) <= (v + 0.9) / 1.9;     // triangle
        case 4: return std::abs(u) <= 0.3 || std::abs(v) <= 0.3;       // plus
        case 5: return std::abs(u - v) <= 0.4 || std::abs(u + v) <= 0.4;  // x
        case 6: return static_cast<int>(std::floor((v + 1) * 2.5)) % 2 == 0;  // stripes
        case 7: return (static_cast<int>(std::floor((u + 1) * 2)) + static_cast<int>(std::floor((v + 1) * 2))) % 2 == 0;
        default: return false;
    }
}

inline std::array<double, 3> hue_rgb(double hue, double sat, double val) {
    const double h = std::fmod(hue, 1.0) * 6.0;
    const int i = static_cast<int>(h);
    const double f = h - i, p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
    switch (i % 6) {
        case 0: return {val, t, p};
        case 1: return {q, val, p};
        case 2: return {p, val, t};
        case 3: return {p, q, val};
        case 4: return {t, p, val};
        default: return {val, p, q};
    }
}

inline LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.classes == 0 || spec.images_per_class == 0) throw std::invalid_argument("synthetic: empty spec");
    if (spec.classes > kPartShapes * kPartHues)
        throw std::invalid_argument("synthetic: at most " + std::to_string(kPartShapes * kPartHues) + " classes");
    if (spec.part_size + 2 > spec.image_size) throw std::invalid_argument("synthetic: part does not fit the image");
    const std::size_t S = spec.image_size;
    std::mt19937_64 rng(derive_seed(spec.seed, 0));
    std::uniform_real_distribution<double> u(0.0, 1.0);

    // Class identities: distinct (shape, hue) combinations.
    std::vector<std::size_t> combos(kPartShapes * kPartHues);
    std::iota(combos.begin(), combos.end(), 0);
    std::shuffle(combos.begin(), combos.end(), rng);
    combos.resize(spec.classes);

    LabeledDataset data;
    data.channels = 3;
    data.height = data.width = S;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        data.class_names.push_back("class" + std::string(c < 10 ? "0" : "") + std::to_string(c));
        data.class_split.push_back(Split::test);
    }
    std::vector<std::size_t> order(spec.classes);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::lround(spec.train_fraction * spec.classes));
    const auto n_val = static_cast<std::size_t>(std::lround(spec.val_fraction * spec.classes));
    for (std::size_t i = 0; i < spec.classes; ++i)
        data.class_split[order[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);

    for (std::size_t c = 0; c < spec.classes; ++c) {
        const std::size_t shape = combos[c] / kPartHues;
        const double hue = static_cast<double>(combos[c] % kPartHues) / kPartHues;
        for (std::size_t n = 0; n < spec.images_per_class; ++n) {
            std::mt19937_64 g(derive_seed(spec.seed, 1 + c * 100003 + n));
            Sample smp;
            smp.label = c;
            Image& img = smp.image;
            img.channels = 3;
            img.height = img.width = S;
            img.pixels.assign(3 * S * S, 0.f);

            // background: tinted gray with a low-frequency wave
            const double base = 0.3 + 0.3 * u(g);
            const std::array<double, 3> tint{0.08 * (u(g) - 0.5), 0.08 * (u(g) - 0.5), 0.08 * (u(g) - 0.5)};
            const double fx = 0.1 + 0.3 * u(g), fy = 0.1 + 0.3 * u(g), ph = 6.283 * u(g);
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    const double wave = 0.06 * std::sin(fx * x + fy * y + ph);
                    for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = static_cast<float>(base + tint[ch] + wave);
                }

            // body blob, class independent
            const double cx = S / 2.0 + (u(g) - 0.5) * S * 0.2, cy = S / 2.0 + (u(g) - 0.5) * S * 0.2;
            const double rx = S * (0.28 + 0.1 * u(g)), ry = S * (0.22 + 0.1 * u(g));
            const auto body = hue_rgb(u(g), 0.25 * u(g), 0.35 + 0.4 * u(g));
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
                    if (dx * dx + dy * dy <= 1.0)
                        for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = static_cast<float>(body[ch]);
                }

            const std::size_t P = spec.part_size;
            auto draw_shape = [&](std::size_t shp, int x0, int y0, std::size_t size, const std::array<double, 3>& rgb) {
                for (std::size_t yy = 0; yy < size; ++yy)
                    for (std::size_t xx = 0; xx < size; ++xx) {
                        const double pu = 2.0 * (xx + 0.5) / size - 1.0, pv = 2.0 * (yy + 0.5) / size - 1.0;
                        if (!part_shape_mask(shp, pu, pv)) continue;
                        for (std::size_t ch = 0; ch < 3; ++ch)
                            img.at(ch, y0 + yy, x0 + xx) = static_cast<float>(rgb[ch]);
                    }
            };

            // part position first so distractors can avoid it
            const int span = static_cast<int>(S - P - 2);
            const int px = 1 + static_cast<int>(u(g) * span), py = 1 + static_cast<int>(u(g) * span);
            const Box part{px, py, px + static_cast<int>(P), py + static_cast<int>(P)};

            // low-saturation distractor marks of any shape
            for (std::size_t d = 0; d < spec.distractors; ++d) {
                const std::size_t size = P - 2 + static_cast<std::size_t>(u(g) * 3);
                Box box{};
                for (int attempt = 0; attempt < 20; ++attempt) {
                    const int dx = static_cast<int>(u(g) * (S - size)), dy = static_cast<int>(u(g) * (S - size));
                    box = {dx, dy, dx + static_cast<int>(size), dy + static_cast<int>(size)};
                    if (!box.overlaps(part)) break;
                }
                const double gray = 0.15 + 0.7 * u(g);
                draw_shape(static_cast<std::size_t>(u(g) * kPartShapes) % kPartShapes, box.x0, box.y0, size,
                           hue_rgb(u(g), 0.12, gray));
            }

            // the distinctive part
            auto rgb = hue_rgb(hue + (u(g) - 0.5) * 0.04, 0.85, 0.9);
            for (auto& v : rgb) v = std::clamp(v + (u(g) - 0.5) * 2 * spec.color_jitter, 0.0, 1.0);
            draw_shape(shape, part.x0, part.y0, P, rgb);
            smp.part_box = part;

            std::normal_distribution<double> noise(0.0, spec.noise);
            for (auto& v : img.pixels) v = std::clamp(static_cast<float>(v + noise(g)), 0.f, 1.f);
            data.samples.push_back(std::move(smp));
        }
    }
    return data;
}

// Writes one PNG per sample under root/<class>/ plus splits.json.
inline void write_dataset(const LabeledDataset& data, const std::filesystem::path& root) {
    std::filesystem::create_directories(root);
    nlohmann::json splits = nlohmann::json::object();
    for (std::size_t c = 0; c < data.class_count(); ++c) {
        std::filesystem::create_directories(root / data.class_names[c]);
        splits[data.class_names[c]] = to_string(data.class_split[c]);
    }
    std::vector<std::size_t> counter(data.class_count(), 0);
    nlohmann::json boxes = nlohmann::json::object();
    for (const auto& s : data.samples) {
        char name[32];
        std::snprintf(name, sizeof name, "%04zu.png", counter[s.label]++);
        write_png(root / data.class_names[s.label] / name, s.image);
        if (s.part_box)
            boxes[data.class_names[s.label] + "/" + name] = {s.part_box->x0, s.part_box->y0, s.part_box->x1,
                                                             s.part_box->y1};
    }
    std::ofstream(root / "splits.json") << splits.dump(2) << '\n';
    if (!boxes.empty()) std::ofstream(root / "parts.json") << boxes.dump(2) << '\n';
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    return h;
}

// root/<class>/*.png, one directory per class. splits.json (class -> split)
// is honored when present; otherwise classes are ordered by name hash and
// cut 60/20/20. Unreadable or odd-sized images are skipped with a warning.
inline LabeledDataset ingest_directory(const std::filesystem::path& root, std::ostream& warn = std::cerr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw std::invalid_argument("dataset root is not a directory: " + root.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw std::invalid_argument("dataset root has no class directories: " + root.string());

    std::optional<nlohmann::json> splits;
    if (fs::exists(root / "splits.json")) splits = nlohmann::json::parse(std::ifstream(root / "splits.json"));
    std::optional<nlohmann::json> parts;
    if (fs::exists(root / "parts.json")) parts = nlohmann::json::parse(std::ifstream(root / "parts.json"));

    LabeledDataset data;
    bool have_size = false;
    for (std::size_t c = 0; c < names.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(root / names[c]))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::size_t kept = 0;
        for (const auto& f : files) {
            Image img;
            try {
                img = read_png(f);
            } catch (const ImageError& err) {
                warn << "warning: skipping " << f.string() << ": " << err.what() << '\n';
                continue;
            }
            if (!have_size) {
                data.height = img.height;
                data.width = img.width;
                have_size = true;
            } else if (img.height != data.height || img.width != data.width) {
                warn << "warning: skipping " << f.string() << ": size " << img.width << "x" << img.height
                     << " differs from " << data.width << "x" << data.height << '\n';
                continue;
            }
            Sample s;
            s.image = std::move(img);
            s.label = c;
            const std::string key = names[c] + "/" + f.filename().string();
            if (parts && parts->contains(key)) {
                const auto& b = parts->at(key);
                s.part_box = Box{b[0], b[1], b[2], b[3]};
            }
            data.samples.push_back(std::move(s));
            ++kept;
        }
        if (kept == 0) throw std::invalid_argument("class '" + names[c] + "' has no usable images");
        data.class_names.push_back(names[c]);
    }

    data.class_split.assign(names.size(), Split::train);
    if (splits) {
        for (std::size_t c = 0; c < names.size(); ++c) {
            if (!splits->contains(names[c])) throw std::invalid_argument("splits.json lacks class '" + names[c] + "'");
            data.class_split[c] = parse_split(splits->at(names[c]).get<std::string>());
        }
    } else {
        std::vector<std::size_t> order(names.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::pair(fnv1a(names[a]), names[a]) < std::pair(fnv1a(names[b]), names[b]);
        });
        const auto n_train = static_cast<std::size_t>(std::lround(0.6 * names.size()));
        const auto n_val = static_cast<std::size_t>(std::lround(0.2 * names.size()));
        for (std::size_t i = 0; i < order.size(); ++i)
            data.class_split[order[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    }
    data.validate();
    return data;
}

}  // namespace rcn
