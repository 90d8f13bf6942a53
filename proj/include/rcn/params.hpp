#pragma once

// Named parameter registry plus the checkpoint format: one flat
// little-endian float32 file per tensor and a JSON manifest
// (name -> shape, file) next to them.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "rcn/tensor.hpp"

namespace rcn {

inline constexpr const char* kParamManifest = "manifest.json";
inline constexpr int kParamFormatVersion = 1;

template <class T>
class ParamStore {
   public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool trainable;
    };

    // Registers a tensor under a unique name. Trainable entries get requires_grad.
    Tensor<T>& add(const std::string& name, Tensor<T> tensor, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        tensor.set_requires_grad(trainable);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(tensor), trainable});
        return entries_.back().tensor;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }

    const std::vector<Entry>& entries() const { return entries_; }

    std::vector<Tensor<T>> trainable() const {
        std::vector<Tensor<T>> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.tensor);
        return out;
    }

    std::size_t trainable_count(std::string_view prefix = {}) const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable && e.name.starts_with(prefix)) n += e.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    // Copies values from another store with identical names and shapes.
    void copy_values_from(const ParamStore& other) {
        for (auto& e : entries_) {
            const auto& src = other.get(e.name);
            if (src.shape() != e.tensor.shape())
                throw ShapeError("copy_values_from: " + e.name + " shape " + shape_str(src.shape()) + " vs " +
                                 shape_str(e.tensor.shape()));
            std::copy(src.data().begin(), src.data().end(), e.tensor.mutable_data().begin());
        }
    }

    // Snapshot of all values, for rollback.
    std::vector<std::vector<T>> snapshot() const {
        std::vector<std::vector<T>> out;
        for (const auto& e : entries_) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
        return out;
    }

    void restore(const std::vector<std::vector<T>>& snap) {
        if (snap.size() != entries_.size()) throw std::invalid_argument("restore: snapshot size mismatch");
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            auto dst = entries_[i].tensor.mutable_data();
            if (snap[i].size() != dst.size()) throw std::invalid_argument("restore: entry size mismatch");
            std::copy(snap[i].begin(), snap[i].end(), dst.begin());
        }
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        nlohmann::json manifest;
        manifest["format"] = "rcn-params";
        manifest["version"] = kParamFormatVersion;
        manifest["dtype"] = "float32-le";
        nlohmann::json params = nlohmann::json::object();
        for (const auto& e : entries_) {
            const std::string file = file_name(e.name);
            write_f32(dir / file, e.tensor.data());
            params[e.name] = {{"shape", e.tensor.shape()}, {"file", file}, {"trainable", e.trainable}};
        }
        manifest["params"] = std::move(params);
        std::ofstream os(dir / kParamManifest);
        if (!os) throw std::runtime_error("cannot write " + (dir / kParamManifest).string());
        os << manifest.dump(2) << '\n';
    }

    // Loads values into the already-registered tensors; every registered name must be present.
    void load(const std::filesystem::path& dir) {
        std::ifstream is(dir / kParamManifest);
        if (!is) throw std::runtime_error("missing checkpoint manifest in " + dir.string());
        const auto manifest = nlohmann::json::parse(is);
        if (manifest.value("format", "") != "rcn-params")
            throw std::runtime_error("not a parameter manifest: " + (dir / kParamManifest).string());
        const auto& params = manifest.at("params");
        for (auto& e : entries_) {
            if (!params.contains(e.name)) throw std::runtime_error("checkpoint lacks parameter " + e.name);
            const auto& rec = params.at(e.name);
            const Shape shape = rec.at("shape").template get<Shape>();
            if (shape != e.tensor.shape())
                throw ShapeError("checkpoint shape for " + e.name + " is " + shape_str(shape) + ", model expects " +
                                 shape_str(e.tensor.shape()));
            const auto values = read_f32(dir / rec.at("file").template get<std::string>(), e.tensor.size());
            auto dst = e.tensor.mutable_data();
            for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<T>(values[i]);
        }
    }

    static std::string file_name(const std::string& name) {
        std::string out = name;
        for (char& c : out)
            if (c == '/' || c == '\\' || c == ' ') c = '_';
        return out + ".f32";
    }

    static void write_f32(const std::filesystem::path& path, std::span<const T> values) {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        for (T v : values) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
            unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
            os.write(reinterpret_cast<const char*>(bytes), 4);
        }
    }

    static std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot read " + path.string());
        std::vector<float> out(expected);
        for (std::size_t i = 0; i < expected; ++i) {
            unsigned char b[4];
            if (!is.read(reinterpret_cast<char*>(b), 4))
                throw std::runtime_error(path.string() + ": truncated, expected " + std::to_string(expected) +
                                         " floats");
            const std::uint32_t bits = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                                       std::uint32_t(b[3]) << 24;
            out[i] = std::bit_cast<float>(bits);
        }
        if (is.peek() != std::char_traits<char>::eof())
            throw std::runtime_error(path.string() + ": trailing bytes after " + std::to_string(expected) + " floats");
        return out;
    }

   private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// He-normal initialization for a weight with the given fan-in.
template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace rcn
