// rcn — train, evaluate and interpret region comparison models.
//
//   rcn synth      --out DIR                      write a synthetic dataset
//   rcn train      --out DIR [data] [model]       meta-train, checkpoint + log
//   rcn eval       --checkpoint DIR | --scorer S  mean ± 95% half-width
//   rcn explain    --checkpoint DIR --support I --query J --out DIR
//   rcn generalize --checkpoint DIR --support I --out DIR
//
// Exit status: 0 ok, 1 user error, 2 internal error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "rcn/rcn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRunFormatVersion = 1;

// Anything the user can fix by changing flags or inputs.
struct UserError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataOptions {
    std::string dir;
    rcn::SyntheticSpec synth;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
    cmd->add_option("--data", d.dir, "Dataset directory (<root>/<class>/*.png); synthetic data when omitted");
    cmd->add_option("--classes", d.synth.classes, "Synthetic: number of classes")->capture_default_str();
    cmd->add_option("--per-class", d.synth.images_per_class, "Synthetic: images per class")->capture_default_str();
    cmd->add_option("--size", d.synth.image_size, "Synthetic: image side in pixels")->capture_default_str();
    cmd->add_option("--part-size", d.synth.part_size, "Synthetic: distinctive part side")->capture_default_str();
    cmd->add_option("--train-fraction", d.synth.train_fraction, "Synthetic: fraction of classes for training")
        ->capture_default_str();
    cmd->add_option("--val-fraction", d.synth.val_fraction, "Synthetic: fraction of classes for validation")
        ->capture_default_str();
    cmd->add_option("--data-seed", d.synth.seed, "Synthetic: generator seed")->capture_default_str();
}

json data_json(const DataOptions& d) {
    if (!d.dir.empty()) return {{"kind", "directory"}, {"path", fs::absolute(d.dir).string()}};
    const auto& s = d.synth;
    return {{"kind", "synthetic"},      {"classes", s.classes},
            {"per_class", s.images_per_class}, {"size", s.image_size},
            {"part_size", s.part_size},        {"train_fraction", s.train_fraction},
            {"val_fraction", s.val_fraction},  {"seed", s.seed}};
}

DataOptions data_from_json(const json& j) {
    DataOptions d;
    if (j.at("kind") == "directory") {
        d.dir = j.at("path");
        return d;
    }
    d.synth.classes = j.at("classes");
    d.synth.images_per_class = j.at("per_class");
    d.synth.image_size = j.at("size");
    d.synth.part_size = j.at("part_size");
    d.synth.train_fraction = j.at("train_fraction");
    d.synth.val_fraction = j.at("val_fraction");
    d.synth.seed = j.at("seed");
    return d;
}

rcn::LabeledDataset load_data(const DataOptions& d) {
    if (!d.dir.empty()) {
        if (!fs::is_directory(d.dir)) throw UserError("dataset directory not found: " + d.dir);
        try {
            auto data = rcn::ingest_directory(d.dir);
            data.validate();
            return data;
        } catch (const json::exception& e) {
            throw UserError("malformed dataset metadata in " + d.dir + ": " + e.what());
        }
    }
    return rcn::generate_synthetic(d.synth);
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw UserError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw UserError("cannot read " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw UserError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw UserError("cannot create " + dir.string() + ": " + ec.message());
}

// A checkpoint is either the directory holding model.json or a training
// output directory containing checkpoint/.
fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::exists(p / rcn::kModelFile)) return p;
    if (fs::exists(p / "checkpoint" / rcn::kModelFile)) return p / "checkpoint";
    throw UserError("no checkpoint at " + p.string());
}

// Data recorded by the training run, used when no data flags are given.
std::optional<DataOptions> recorded_data(const fs::path& checkpoint) {
    const auto echo = checkpoint.parent_path() / "config.json";
    if (!fs::exists(echo)) return std::nullopt;
    const auto j = read_json(echo);
    if (!j.contains("data")) return std::nullopt;
    return data_from_json(j.at("data"));
}

std::unique_ptr<rcn::RcnModel<float>> load_model(const fs::path& checkpoint) {
    try {
        return rcn::load_checkpoint<float>(checkpoint);
    } catch (const json::exception& e) {
        throw UserError("malformed checkpoint " + checkpoint.string() + ": " + e.what());
    }
}

void check_compatible(const rcn::RcnModel<float>& model, const rcn::LabeledDataset& data) {
    const auto& b = model.config().backbone;
    if (b.image_h != data.height || b.image_w != data.width || b.in_channels != data.channels)
        throw UserError("dataset images are " + std::to_string(data.width) + "x" + std::to_string(data.height) +
                        " but the model expects " + std::to_string(b.image_w) + "x" + std::to_string(b.image_h));
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

std::size_t check_index(std::size_t i, const rcn::LabeledDataset& data, const char* what) {
    if (i >= data.samples.size())
        throw UserError(std::string(what) + " index " + std::to_string(i) + " is out of range (dataset has " +
                        std::to_string(data.samples.size()) + " images)");
    return i;
}

// ---- synth ----------------------------------------------------------------------------

struct SynthArgs {
    DataOptions data;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    if (!a.data.dir.empty()) throw UserError("synth generates data; --data is not accepted");
    make_dir(a.out);
    const auto data = rcn::generate_synthetic(a.data.synth);
    rcn::write_dataset(data, a.out);
    std::cout << "wrote " << data.samples.size() << " images in " << data.class_count() << " classes to " << a.out
              << '\n';
    return 0;
}

// ---- train ----------------------------------------------------------------------------

struct TrainArgs {
    DataOptions data;
    std::string out;
    std::string backbone = "conv4-64";
    std::string head = "meta";
    std::string metric = "cosine";
    std::string aggregation = "mean";
    std::size_t hw = 5;
    std::size_t meta_hidden = 64;
    rcn::TrainConfig train;
    bool no_augment = false;
};

int cmd_train(TrainArgs a) {
    rcn::ModelConfig mc;
    try {
        mc.backbone = rcn::BackboneConfig::preset(a.backbone);
        mc.head = rcn::parse_head(a.head);
        mc.metric.kind = rcn::parse_metric(a.metric);
        mc.aggregation = rcn::parse_aggregation(a.aggregation);
    } catch (const std::invalid_argument& e) {
        throw UserError(e.what());
    }
    const auto data = load_data(a.data);
    mc.backbone.in_channels = data.channels;
    mc.backbone.image_h = data.height;
    mc.backbone.image_w = data.width;
    mc.backbone.out_h = mc.backbone.out_w = a.hw;
    mc.meta_hidden = a.meta_hidden;
    mc.seed = a.train.seed;
    a.train.augment = !a.no_augment;

    make_dir(a.out);
    const fs::path out(a.out);
    write_json(out / "config.json",
               {{"command", "train"},
                {"format", "rcn-run"},
                {"version", kRunFormatVersion},
                {"data", data_json(a.data)},
                {"model", rcn::to_json(mc)},
                {"train",
                 {{"iterations", a.train.iterations},
                  {"episodes_per_iteration", a.train.episodes_per_iteration},
                  {"val_episodes", a.train.val_episodes},
                  {"way", a.train.way},
                  {"shot", a.train.shot},
                  {"queries", a.train.queries},
                  {"learning_rate", a.train.learning_rate},
                  {"augment", a.train.augment},
                  {"max_seconds", a.train.max_seconds},
                  {"seed", a.train.seed}}},
                {"out", fs::absolute(out).string()}});

    rcn::RcnModel<float> model(mc);
    if (a.train.iterations == 0) {
        rcn::save_checkpoint(model, out / "checkpoint");
        std::cout << "wrote initial checkpoint to " << (out / "checkpoint").string() << '\n';
        return 0;
    }

    std::ofstream log(out / "train_log.jsonl");
    if (!log) throw UserError("cannot write " + (out / "train_log.jsonl").string());
    const auto result = rcn::train(model, data, a.train, [&](const rcn::IterationRecord& r) {
        log << r.to_json().dump() << '\n' << std::flush;
        std::cerr << "iteration " << r.iteration << "  loss " << r.train_loss << "  val " << r.val_accuracy << " ± "
                  << r.val_half_width << "  lr " << r.learning_rate << (r.best ? "  *" : "") << '\n';
    });
    rcn::save_checkpoint(model, out / "checkpoint");
    write_json(out / "train_summary.json", {{"iterations_run", result.log.size()},
                                            {"best_val_accuracy", result.best_val_accuracy},
                                            {"diverged", result.diverged},
                                            {"stop_reason", result.stop_reason}});
    std::cout << "training stopped (" << result.stop_reason << "); best validation accuracy "
              << result.best_val_accuracy << "%\n";
    return 0;
}

// ---- eval -----------------------------------------------------------------------------

struct EvalArgs {
    DataOptions data;
    bool data_given = false;
    std::string checkpoint;
    std::string scorer = "model";
    std::string split = "test";
    std::string out;
    rcn::EvalProtocol protocol;
};

rcn::EpisodeScorer oracle_scorer() {
    return [](const rcn::Episode& ep) {
        const auto t = rcn::pair_targets(ep);
        return std::vector<double>(t.begin(), t.end());
    };
}

// Seeded from the episode's own contents so scores do not depend on threading.
rcn::EpisodeScorer random_scorer(std::uint64_t seed) {
    return [seed](const rcn::Episode& ep) {
        std::uint64_t key = seed;
        for (const auto& it : ep.support) key = rcn::derive_seed(key, it.sample);
        for (const auto& it : ep.query) key = rcn::derive_seed(key, it.sample);
        std::mt19937_64 rng(key);
        std::uniform_real_distribution<double> u(0, 1);
        std::vector<double> s(ep.support.size() * ep.query.size());
        for (auto& v : s) v = u(rng);
        return s;
    };
}

int cmd_eval(EvalArgs a) {
    try {
        a.protocol.split = rcn::parse_split(a.split);
    } catch (const std::invalid_argument& e) {
        throw UserError(e.what());
    }
    std::unique_ptr<rcn::RcnModel<float>> model;
    fs::path out = a.out;
    DataOptions source = a.data;
    if (a.scorer == "model") {
        if (a.checkpoint.empty()) throw UserError("eval needs --checkpoint (or --scorer oracle|random)");
        const auto ckpt = resolve_checkpoint(a.checkpoint);
        model = load_model(ckpt);
        if (!a.data_given)
            if (auto rec = recorded_data(ckpt)) source = *rec;
        if (out.empty()) out = ckpt.parent_path();
    } else if (a.scorer != "oracle" && a.scorer != "random") {
        throw UserError("unknown scorer '" + a.scorer + "' (expected model|oracle|random)");
    }
    const auto data = load_data(source);
    if (model) check_compatible(*model, data);

    rcn::EvalReport report;
    try {
        if (model)
            report = rcn::evaluate(*model, data, a.protocol);
        else if (a.scorer == "oracle")
            report = rcn::evaluate_with(oracle_scorer, data, a.protocol);
        else
            report = rcn::evaluate_with([&] { return random_scorer(a.protocol.seed); }, data, a.protocol);
    } catch (const rcn::EpisodeError& e) {
        throw UserError(e.what());
    }

    std::cout << report.formatted() << '\n';
    if (!out.empty()) {
        make_dir(out);
        auto j = report.to_json();
        j["scorer"] = a.scorer;
        j["split"] = a.split;
        j["way"] = a.protocol.way;
        j["shot"] = a.protocol.shot;
        j["queries"] = a.protocol.queries;
        j["seed"] = a.protocol.seed;
        j["data"] = data_json(source);
        if (!a.checkpoint.empty()) j["checkpoint"] = fs::absolute(a.checkpoint).string();
        write_json(out / "eval.json", j);
    }
    return 0;
}

// ---- explain / generalize --------------------------------------------------------------

struct InterpretArgs {
    DataOptions data;
    bool data_given = false;
    std::string checkpoint;
    std::string out;
    std::size_t support = 0;
    std::size_t query = 1;
};

struct Loaded {
    std::unique_ptr<rcn::RcnModel<float>> model;
    rcn::LabeledDataset data;
    DataOptions source;
};

Loaded load_for_interpretation(const InterpretArgs& a) {
    Loaded l;
    const auto ckpt = resolve_checkpoint(a.checkpoint);
    l.model = load_model(ckpt);
    l.source = a.data;
    if (!a.data_given)
        if (auto rec = recorded_data(ckpt)) l.source = *rec;
    l.data = load_data(l.source);
    check_compatible(*l.model, l.data);
    return l;
}

int cmd_explain(const InterpretArgs& a) {
    auto l = load_for_interpretation(a);
    check_index(a.support, l.data, "support");
    check_index(a.query, l.data, "query");
    const auto ex = rcn::explain_pair(*l.model, l.data, a.support, a.query);
    make_dir(a.out);
    const fs::path out(a.out);
    rcn::write_png(out / "support.png", l.data.samples[a.support].image);
    rcn::write_png(out / "query.png", l.data.samples[a.query].image);
    rcn::export_heatmap(ex.map, l.data.samples[a.query].image, out / "ram.png");
    write_json(out / "explain.json",
               {{"command", "explain"},
                {"format", "rcn-explain"},
                {"version", kRunFormatVersion},
                {"checkpoint", fs::absolute(a.checkpoint).string()},
                {"data", data_json(l.source)},
                {"support", a.support},
                {"query", a.query},
                {"support_class", l.data.class_names[l.data.samples[a.support].label]},
                {"query_class", l.data.class_names[l.data.samples[a.query].label]},
                {"similarity", ex.similarity},
                {"weights", std::vector<float>(ex.weight.values.data().begin(), ex.weight.values.data().end())},
                {"region_scores",
                 std::vector<float>(ex.match.scores.values.data().begin(), ex.match.scores.values.data().end())},
                {"ram", std::vector<float>(ex.map.values.data().begin(), ex.map.values.data().end())}});
    std::cout << "similarity " << ex.similarity << "; heatmap written to " << (out / "ram.png").string() << '\n';
    return 0;
}

int cmd_generalize(const InterpretArgs& a) {
    auto l = load_for_interpretation(a);
    check_index(a.support, l.data, "support");
    rcn::Generalization g;
    try {
        g = rcn::generalize(*l.model, l.data, a.support);
    } catch (const rcn::DegenerateSupportError& e) {
        throw UserError(e.what());
    }
    make_dir(a.out);
    const fs::path out(a.out);
    const auto& bb = l.model->config().backbone;
    auto j = g.report.to_json();
    j["command"] = "generalize";
    j["format"] = "rcn-importance";
    j["version"] = kRunFormatVersion;
    j["checkpoint"] = fs::absolute(a.checkpoint).string();
    j["data"] = data_json(l.source);
    j["support"] = a.support;
    j["class"] = l.data.class_names[l.data.samples[a.support].label];
    j["queries"] = g.queries.size();
    j["grid"] = {bb.out_h, bb.out_w};
    j["top_region"] = g.report.top_region();
    j["top_box"] = {g.top_box.x0, g.top_box.y0, g.top_box.x1, g.top_box.y1};
    if (const auto& part = l.data.samples[a.support].part_box) {
        j["part_box"] = {part->x0, part->y0, part->x1, part->y1};
        j["top_overlaps_part"] = *g.overlaps_part;
    }
    write_json(out / "importance.json", j);
    rcn::write_png(out / "importance.png",
                   rcn::importance_overlay(g.report, bb.out_h, bb.out_w, l.data.samples[a.support].image));
    std::cout << "top region " << g.report.top_region() << " of " << bb.out_h * bb.out_w;
    if (g.overlaps_part) std::cout << (*g.overlaps_part ? " (overlaps the part)" : " (misses the part)");
    std::cout << "; report written to " << (out / "importance.json").string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Region comparison networks for interpretable few-shot classification"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Write a seeded synthetic dataset");
    add_data_options(c_synth, synth.data);
    c_synth->add_option("--out", synth.out, "Output directory")->required();
    c_synth->add_option("--seed", synth.data.synth.seed, "Alias of --data-seed");

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "Meta-train a model");
    add_data_options(c_train, train.data);
    c_train->add_option("--out", train.out, "Output directory")->required();
    c_train->add_option("--backbone", train.backbone, "conv4-64 | conv4-32")->capture_default_str();
    c_train->add_option("--head", train.head, "meta | learnable | fixed")->capture_default_str();
    c_train->add_option("--metric", train.metric, "cosine | tanimoto | expdist | invdist")->capture_default_str();
    c_train->add_option("--aggregation", train.aggregation, "Multi-shot score aggregation: mean | max")
        ->capture_default_str();
    c_train->add_option("--hw", train.hw, "Feature map side h = w")->check(CLI::Range(1, 5))->capture_default_str();
    c_train->add_option("--meta-hidden", train.meta_hidden, "Meta learner hidden channels")->capture_default_str();
    c_train->add_option("--iterations", train.train.iterations, "Training iterations (0 = initial checkpoint only)")
        ->capture_default_str();
    c_train->add_option("--episodes-per-iteration", train.train.episodes_per_iteration)->capture_default_str();
    c_train->add_option("--val-episodes", train.train.val_episodes)->capture_default_str();
    c_train->add_option("--way", train.train.way)->capture_default_str();
    c_train->add_option("--shot", train.train.shot)->capture_default_str();
    c_train->add_option("--queries", train.train.queries, "Queries per class in training episodes")
        ->capture_default_str();
    c_train->add_option("--val-queries", train.train.val_queries)->capture_default_str();
    c_train->add_option("--lr", train.train.learning_rate, "Adam learning rate")->capture_default_str();
    c_train->add_option("--seed", train.train.seed)->capture_default_str();
    train.train.threads = default_threads();
    c_train->add_option("--threads", train.train.threads, "Validation worker threads")->capture_default_str();
    c_train->add_option("--max-seconds", train.train.max_seconds, "Wall-clock budget, 0 = none")
        ->capture_default_str();
    c_train->add_flag("--no-augment", train.no_augment, "Disable query augmentation");

    EvalArgs eval;
    auto* c_eval = app.add_subcommand("eval", "Evaluate on N-way K-shot episodes");
    add_data_options(c_eval, eval.data);
    c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint or training output directory");
    c_eval->add_option("--scorer", eval.scorer, "model | oracle | random")->capture_default_str();
    c_eval->add_option("--split", eval.split, "train | val | test")->capture_default_str();
    c_eval->add_option("--out", eval.out, "Directory for eval.json");
    c_eval->add_option("--episodes", eval.protocol.episodes)->capture_default_str();
    c_eval->add_option("--way", eval.protocol.way)->capture_default_str();
    c_eval->add_option("--shot", eval.protocol.shot)->capture_default_str();
    c_eval->add_option("--queries", eval.protocol.queries)->capture_default_str();
    c_eval->add_option("--seed", eval.protocol.seed)->capture_default_str();
    eval.protocol.threads = default_threads();
    c_eval->add_option("--threads", eval.protocol.threads)->capture_default_str();

    InterpretArgs explain;
    auto* c_explain = app.add_subcommand("explain", "Region activation maps for a support-query pair");
    add_data_options(c_explain, explain.data);
    c_explain->add_option("--checkpoint", explain.checkpoint)->required();
    c_explain->add_option("--out", explain.out)->required();
    c_explain->add_option("--support", explain.support, "Support image index")->capture_default_str();
    c_explain->add_option("--query", explain.query, "Query image index")->capture_default_str();

    InterpretArgs gen;
    auto* c_gen = app.add_subcommand("generalize", "Class-level region importance for one support image");
    add_data_options(c_gen, gen.data);
    c_gen->add_option("--checkpoint", gen.checkpoint)->required();
    c_gen->add_option("--out", gen.out)->required();
    c_gen->add_option("--support", gen.support, "Support image index")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    auto data_given = [](CLI::App* cmd) {
        for (const char* f : {"--data", "--classes", "--per-class", "--size", "--part-size", "--train-fraction",
                              "--val-fraction", "--data-seed"})
            if (cmd->count(f) > 0) return true;
        return false;
    };

    try {
        if (*c_synth) return cmd_synth(synth);
        if (*c_train) return cmd_train(train);
        if (*c_eval) {
            eval.data_given = data_given(c_eval);
            return cmd_eval(eval);
        }
        if (*c_explain) {
            explain.data_given = data_given(c_explain);
            return cmd_explain(explain);
        }
        if (*c_gen) {
            gen.data_given = data_given(c_gen);
            return cmd_generalize(gen);
        }
    } catch (const UserError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) {
        // shape, episode and dataset problems all trace back to inputs
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const rcn::ImageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
