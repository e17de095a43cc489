#pragma once
// Command-line surface: synth, train, generate, evaluate, sweep-lambda.
// Every command writes config.resolved.json into its output directory and
// line-delimited JSON records next to its artifacts.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ddm/checkpoint.hpp"
#include "ddm/data_pipeline.hpp"
#include "ddm/generator.hpp"
#include "ddm/png.hpp"
#include "ddm/trainer.hpp"

namespace ddm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Everything a command needs; mirrors the JSON config document.
struct RunConfig {
    NetworkConfig network;
    TrainConfig train;
    std::string data;  // empty: synthetic subjects
    std::string out = "runs/latest";
    std::string device = "cpu";
    int synthetic_subjects = 5;
    double max_disp = 3.0;
    double train_fraction = 0.9;
    std::vector<double> lambdas{1.0, 5.0, 20.0};
    int frames = 5;
};

inline void to_json(json& j, const RunConfig& c) {
    j = json{{"network", c.network},
             {"train", c.train},
             {"data", c.data},
             {"out", c.out},
             {"device", c.device},
             {"synthetic_subjects", c.synthetic_subjects},
             {"max_disp", c.max_disp},
             {"train_fraction", c.train_fraction},
             {"lambdas", c.lambdas},
             {"frames", c.frames}};
}

inline void from_json(const json& j, RunConfig& c) {
    require_known_keys(j,
                       {"network", "train", "data", "out", "device", "synthetic_subjects", "max_disp",
                        "train_fraction", "lambdas", "frames"},
                       "config");
    if (j.contains("network")) c.network = j.at("network").get<NetworkConfig>();
    if (j.contains("train")) j.at("train").get_to(c.train);
    auto get = [&j](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("data", c.data);
    get("out", c.out);
    get("device", c.device);
    get("synthetic_subjects", c.synthetic_subjects);
    get("max_disp", c.max_disp);
    get("train_fraction", c.train_fraction);
    get("lambdas", c.lambdas);
    get("frames", c.frames);
}

/// "D,H,W" or "DxHxW".
inline Shape3 parse_shape(const std::string& text) {
    std::vector<int> v;
    std::string norm = text;
    std::replace(norm.begin(), norm.end(), 'x', ',');
    std::stringstream ss(norm);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            v.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw std::invalid_argument("--shape expects D,H,W, got '" + text + "'");
        }
    }
    require(v.size() == 3 && v[0] > 0 && v[1] > 0 && v[2] > 0, "--shape expects three positive integers D,H,W");
    return {v[0], v[1], v[2]};
}

inline void write_json(const fs::path& p, const json& j) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << j.dump(2) << "\n";
}

/// Append-only JSON-lines writer.
class JsonLines {
public:
    explicit JsonLines(const fs::path& p) {
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        os_.open(p);
        if (!os_) throw std::runtime_error("cannot write " + p.string());
    }
    void write(const json& j) { os_ << j.dump() << "\n" << std::flush; }

private:
    std::ofstream os_;
};

// ------------------------------------------------------------ checkpoints

inline fs::path state_dir() {
    const char* env = std::getenv("DDM_STATE_DIR");
    return env && *env ? fs::path(env) : fs::path(".ddm");
}

inline void remember_checkpoint(const fs::path& ckpt) {
    fs::create_directories(state_dir());
    std::ofstream(state_dir() / "last_checkpoint") << fs::absolute(ckpt).string() << "\n";
}

/// "last" resolves through the pointer written by the most recent train run.
inline fs::path resolve_checkpoint(const std::string& arg) {
    if (arg != "last") return arg;
    std::ifstream in(state_dir() / "last_checkpoint");
    std::string p;
    if (!in || !std::getline(in, p) || p.empty())
        throw std::runtime_error("--ckpt last: no checkpoint recorded in " + (state_dir() / "last_checkpoint").string());
    return p;
}

// ------------------------------------------------------------ data

inline std::vector<SubjectRecord> synthetic_subjects(const RunConfig& c, std::uint64_t seed) {
    SyntheticOptions opt;
    opt.shape = c.network.image_shape;
    opt.max_disp = c.max_disp;
    std::vector<SubjectRecord> out;
    for (int k = 0; k < c.synthetic_subjects; ++k) out.push_back(make_synthetic_pair(seed + k, opt));
    return out;
}

inline std::vector<SubjectRecord> load_subjects(const RunConfig& c) {
    if (c.data.empty()) return synthetic_subjects(c, c.train.seed);
    PreprocessOptions opt;
    opt.shape = c.network.image_shape;
    auto records = load_dataset(c.data, opt);
    for (const auto& r : records)
        require(r.ed.shape() == c.network.image_shape, "subject " + r.id + " has shape " + r.ed.shape().str() +
                                                           " but the network expects " +
                                                           c.network.image_shape.str() + " (use --shape)");
    return records;
}

/// Training/test partition; small sets are used whole for both.
inline std::pair<std::vector<SubjectRecord>, std::vector<SubjectRecord>> partition(std::vector<SubjectRecord> records,
                                                                                   const RunConfig& c) {
    const auto n_train = static_cast<std::size_t>(std::lround(c.train_fraction * records.size()));
    if (c.train_fraction >= 1.0 || n_train == 0 || n_train >= records.size()) return {records, records};
    return split_dataset(std::move(records), c.train_fraction, c.train.seed);
}

inline std::vector<TrainingPair> pairs_of(const std::vector<SubjectRecord>& records) {
    std::vector<TrainingPair> pairs;
    for (const auto& r : records) pairs.push_back({&r.ed, &r.es});
    return pairs;
}

// ------------------------------------------------------------ training

struct TrainOutcome {
    TrainState state;
    FitResult fit;
    fs::path checkpoint;
};

inline TrainOutcome train_model(const RunConfig& c, const std::vector<SubjectRecord>& train_set, const fs::path& out,
                                bool quiet = false) {
    validate(c.train);
    TrainOutcome o{make_train_state(c.network, c.train), {}, out / "model.ckpt"};
    JsonLines log(out / "train_log.jsonl");
    FitOptions opts;
    opts.on_epoch = [&](const EpochRecord& r) {
        log.write(to_json(r));
        if (!quiet)
            std::cout << "epoch " << r.epoch << "  total " << r.loss.total << "  diffuse " << r.loss.diffuse
                      << "  ncc " << -r.loss.deform_similarity << "  smooth " << r.loss.deform_smooth << "\n";
    };
    opts.checkpoint = [&](const TrainState& st) {
        save_checkpoint(o.checkpoint, st, c.train);
        remember_checkpoint(o.checkpoint);
    };
    o.fit = fit(o.state, pairs_of(train_set), c.train, opts);
    return o;
}

// ------------------------------------------------------------ inference

inline std::vector<Frame> run_sequence(const ModelWeights& w, const Volume& S, const Volume& T, int n) {
    if (w.config().mode == ModelMode::Direct) return baseline_scaled_sequence(w, S, T, n);
    return generate_sequence(w, S, T, n).frames;
}

struct SubjectMetrics {
    std::string id;
    double psnr = 0, nmse = 0, time = 0;
    std::optional<DiceResult> dice;
    double initial_psnr = 0, initial_nmse = 0;
    std::optional<double> initial_dice;
};

inline SubjectMetrics evaluate_subject(const ModelWeights& w, const SubjectRecord& r) {
    SubjectMetrics m;
    m.id = r.id;
    const auto t0 = std::chrono::steady_clock::now();
    const auto frames = run_sequence(w, r.ed, r.es, r.n_frames);
    m.time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // generated vs real intermediate frames when available, else the endpoint
    if (r.intermediate_frames.size() == frames.size()) {
        for (std::size_t k = 0; k < frames.size(); ++k) {
            m.psnr += psnr(frames[k].image, r.intermediate_frames[k]);
            m.nmse += nmse(frames[k].image, r.intermediate_frames[k]);
        }
        m.psnr /= frames.size();
        m.nmse /= frames.size();
    } else {
        m.psnr = psnr(frames.back().image, r.es);
        m.nmse = nmse(frames.back().image, r.es);
    }
    m.initial_psnr = psnr(r.ed, r.es);
    m.initial_nmse = nmse(r.ed, r.es);
    if (r.ed_seg && r.es_seg) {
        auto labels = foreground_labels(*r.es_seg);
        for (int l : foreground_labels(*r.ed_seg)) labels.insert(l);
        if (!labels.empty()) {
            m.dice = dice(warp_nearest(*r.ed_seg, frames.back().field), *r.es_seg, labels);
            m.initial_dice = dice(*r.ed_seg, *r.es_seg, labels).mean;
        }
    }
    return m;
}

inline json metrics_record(const SubjectMetrics& m) {
    json metrics{{"PSNR", m.psnr}, {"NMSE", m.nmse}, {"Time", m.time}};
    json initial{{"PSNR", m.initial_psnr}, {"NMSE", m.initial_nmse}};
    json j{{"subject", m.id}};
    if (m.dice) {
        metrics["Dice"] = m.dice->mean;
        json per;
        for (auto [l, d] : m.dice->per_label) per[std::to_string(l)] = d;
        j["dice_per_structure"] = per;
    }
    if (m.initial_dice) initial["Dice"] = *m.initial_dice;
    j["metrics"] = metrics;
    j["initial"] = initial;
    return j;
}

struct Stat {
    double mean = 0, sd = 0;
    int n = 0;
};

inline Stat stat(const std::vector<double>& v) {
    Stat s;
    s.n = static_cast<int>(v.size());
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= v.size();
    for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
    s.sd = v.size() > 1 ? std::sqrt(s.sd / (v.size() - 1)) : 0.0;
    return s;
}

/// Mean and standard deviation of PSNR, NMSE, Dice, Time across subjects.
inline json summarize(const std::vector<SubjectMetrics>& ms) {
    std::vector<double> p, n, d, t, d0;
    for (const auto& m : ms) {
        p.push_back(m.psnr);
        n.push_back(m.nmse);
        t.push_back(m.time);
        if (m.dice) d.push_back(m.dice->mean);
        if (m.initial_dice) d0.push_back(*m.initial_dice);
    }
    auto js = [](const Stat& s) { return json{{"mean", s.mean}, {"std", s.sd}, {"n", s.n}}; };
    json out{{"PSNR", js(stat(p))}, {"NMSE", js(stat(n))}, {"Time", js(stat(t))}};
    if (!d.empty()) out["Dice"] = js(stat(d));
    if (!d0.empty()) out["initial_Dice"] = js(stat(d0));
    return out;
}

inline std::vector<SubjectMetrics> evaluate_all(const ModelWeights& w, const std::vector<SubjectRecord>& subjects,
                                                JsonLines* sink) {
    std::vector<SubjectMetrics> out;
    for (const auto& r : subjects) {
        require(r.ed.shape() == w.config().image_shape, "subject " + r.id + " has shape " + r.ed.shape().str() +
                                                            " but the checkpoint expects " +
                                                            w.config().image_shape.str());
        if (!r.es_seg) std::cerr << "warning: subject " << r.id << " has no ES segmentation; Dice omitted\n";
        out.push_back(evaluate_subject(w, r));
        if (sink) sink->write(metrics_record(out.back()));
    }
    return out;
}

// ------------------------------------------------------------ sweep

struct SweepRow {
    double lambda = 0;
    std::optional<json> summary;
    std::string error;
};

inline std::vector<SweepRow> sweep_lambda(const RunConfig& base, const std::vector<SubjectRecord>& train_set,
                                          const std::vector<SubjectRecord>& test_set, const fs::path& out,
                                          bool quiet = false) {
    require(base.lambdas.size() >= 2, "sweep-lambda needs at least two lambda values");
    std::vector<double> values = base.lambdas;
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    std::vector<SweepRow> rows;
    for (double lambda : values) {
        SweepRow row;
        row.lambda = lambda;
        try {
            RunConfig c = base;
            c.train.lambda = lambda;
            std::ostringstream name;
            name << "lambda_" << lambda;
            const auto o = train_model(c, train_set, out / name.str(), quiet);
            if (o.fit.aborted) throw std::runtime_error("training aborted: " + o.fit.abort_reason);
            row.summary = summarize(evaluate_all(o.state.weights, test_set, nullptr));
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ------------------------------------------------------------ commands

inline void check_device(const std::string& d) {
    require(d == "cpu", "--device " + d + " is not available; this build runs on cpu only");
}

inline int cmd_synth(const RunConfig& c) {
    const fs::path out = c.out;
    fs::create_directories(out);
    write_json(out / "config.resolved.json", c);
    JsonLines idx(out / "subjects.jsonl");
    for (const auto& r : synthetic_subjects(c, c.train.seed)) {
        write_subject(out, r);
        idx.write({{"id", r.id}, {"shape", r.ed.shape().str()}, {"mean_disp", mean_magnitude(*r.gt_field)}});
    }
    std::cout << "wrote " << c.synthetic_subjects << " synthetic subjects to " << out.string() << "\n";
    return 0;
}

inline int cmd_train(const RunConfig& c) {
    const fs::path out = c.out;
    fs::create_directories(out);
    write_json(out / "config.resolved.json", c);
    auto [train_set, test_set] = partition(load_subjects(c), c);
    json split{{"train", json::array()}, {"test", json::array()}};
    for (const auto& r : train_set) split["train"].push_back(r.id);
    for (const auto& r : test_set) split["test"].push_back(r.id);
    write_json(out / "split.json", split);
    const auto o = train_model(c, train_set, out);
    if (o.fit.aborted) {
        std::cerr << "error: " << o.fit.abort_reason << "; last good checkpoint kept at " << o.checkpoint.string()
                  << "\n";
        return 1;
    }
    std::cout << "checkpoint " << o.checkpoint.string() << "\n";
    return 0;
}

inline int cmd_generate(RunConfig c, const std::string& ckpt_arg) {
    const fs::path ckpt = resolve_checkpoint(ckpt_arg);
    const Checkpoint ck = load_checkpoint(ckpt);
    c.network = ck.state.weights.config();
    const fs::path out = c.out;
    fs::create_directories(out);
    json resolved = c;
    resolved["checkpoint"] = ckpt.string();
    write_json(out / "config.resolved.json", resolved);
    require(c.frames >= 2, "--frames must be at least 2");

    std::vector<SubjectRecord> subjects;
    if (c.data.empty())
        subjects.push_back(make_synthetic_pair(c.train.seed, c.network.image_shape, c.max_disp));
    else
        subjects = load_subjects(c);
    JsonLines records(out / "frames.jsonl");
    for (const auto& r : subjects) {
        const fs::path d = out / r.id;
        fs::create_directories(d);
        const auto frames = run_sequence(ck.state.weights, r.ed, r.es, c.frames);
        std::vector<const Volume*> strip;
        for (std::size_t k = 0; k < frames.size(); ++k) {
            nifti::write_volume(d / frame_name(static_cast<int>(k)), frames[k].image);
            char name[32];
            std::snprintf(name, sizeof name, "field_%02zu.nii.gz", k);
            nifti::write_field(d / name, frames[k].field, r.ed.spacing);
            strip.push_back(&frames[k].image);
            records.write({{"subject", r.id},
                           {"frame", k},
                           {"gamma", frames[k].gamma},
                           {"mean_disp", mean_magnitude(frames[k].field)},
                           {"ncc_target", local_ncc(frames[k].image, r.es, effective_ncc_window(c.train.ncc_window,
                                                                                               r.es.shape()))}});
        }
        png::write(d / "montage.png", png::montage(strip));
    }
    std::cout << "wrote " << c.frames << " frames per subject to " << out.string() << "\n";
    return 0;
}

inline int cmd_evaluate(RunConfig c, const std::string& ckpt_arg) {
    require(!c.data.empty(), "evaluate needs --data");
    const fs::path ckpt = resolve_checkpoint(ckpt_arg);
    const Checkpoint ck = load_checkpoint(ckpt);
    c.network = ck.state.weights.config();
    const fs::path out = c.out;
    fs::create_directories(out);
    json resolved = c;
    resolved["checkpoint"] = ckpt.string();
    write_json(out / "config.resolved.json", resolved);

    JsonLines records(out / "metrics.jsonl");
    const auto ms = evaluate_all(ck.state.weights, load_subjects(c), &records);
    const json summary = summarize(ms);
    write_json(out / "summary.json", summary);
    std::cout << std::left << std::setw(16) << "subject" << std::setw(12) << "PSNR" << std::setw(14) << "NMSE"
              << std::setw(10) << "Dice" << "Time\n";
    for (const auto& m : ms)
        std::cout << std::setw(16) << m.id << std::setw(12) << m.psnr << std::setw(14) << m.nmse << std::setw(10)
                  << (m.dice ? std::to_string(m.dice->mean) : std::string("-")) << m.time << "\n";
    std::cout << "summary " << summary.dump() << "\n";
    return 0;
}

inline int cmd_sweep(const RunConfig& c) {
    const fs::path out = c.out;
    fs::create_directories(out);
    write_json(out / "config.resolved.json", c);
    auto [train_set, test_set] = partition(load_subjects(c), c);
    const auto rows = sweep_lambda(c, train_set, test_set, out);
    JsonLines sink(out / "sweep.jsonl");
    bool any_ok = false;
    for (const auto& r : rows) {
        json j{{"lambda", r.lambda}};
        if (r.summary) {
            any_ok = true;
            for (const char* k : {"PSNR", "NMSE", "Dice"})
                if (r.summary->contains(k)) j[k] = (*r.summary)[k]["mean"];
        } else {
            j["error"] = r.error;
            std::cerr << "warning: lambda " << r.lambda << " failed: " << r.error << "\n";
        }
        sink.write(j);
        std::cout << j.dump() << "\n";
    }
    return any_ok ? 0 : 1;
}

// ------------------------------------------------------------ dispatch

/// Parses argv and runs one subcommand. Unknown flags print usage and
/// return 2; runtime failures print a one-line diagnostic and return 1.
inline int cmd_dispatch(int argc, const char* const* argv) {
    CLI::App app{"Diffusion deformable model: temporal frame generation between two volumes", "ddm"};
    app.require_subcommand(1);
    std::string config_path, ckpt = "last", shape, data, out, lambdas;
    std::optional<std::string> device;
    std::optional<std::uint64_t> seed;
    std::optional<int> frames;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config document")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "random seed (overrides train.seed)");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--shape", shape, "image shape D,H,W");
        sub->add_option("--device", device, "compute device (cpu)");
    };
    auto* synth = app.add_subcommand("synth", "write synthetic phantom subjects");
    common(synth);
    auto* train = app.add_subcommand("train", "train a model");
    common(train);
    train->add_option("--data", data, "dataset directory (default: synthetic)");
    auto* generate = app.add_subcommand("generate", "generate intermediate frames");
    common(generate);
    generate->add_option("--ckpt", ckpt, "checkpoint path or 'last'");
    generate->add_option("--frames", frames, "number of frames including both endpoints");
    generate->add_option("--data", data, "subjects to generate for (default: one synthetic pair)");
    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
    common(evaluate);
    evaluate->add_option("--ckpt", ckpt, "checkpoint path or 'last'");
    evaluate->add_option("--data", data, "dataset directory")->required();
    auto* sweep = app.add_subcommand("sweep-lambda", "train and evaluate one model per lambda");
    common(sweep);
    sweep->add_option("--data", data, "dataset directory (default: synthetic)");
    sweep->add_option("--lambdas", lambdas, "comma-separated lambda values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        RunConfig c;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            c = json::parse(in).get<RunConfig>();
        }
        if (seed) c.train.seed = *seed;
        if (!shape.empty()) c.network.image_shape = parse_shape(shape);
        if (!data.empty()) c.data = data;
        if (!out.empty()) c.out = out;
        if (frames) c.frames = *frames;
        if (!lambdas.empty()) {
            c.lambdas.clear();
            std::stringstream ss(lambdas);
            std::string item;
            while (std::getline(ss, item, ',')) c.lambdas.push_back(std::stod(item));
        }
        if (device) c.device = *device;
        check_device(c.device);

        if (synth->parsed()) return cmd_synth(c);
        if (train->parsed()) return cmd_train(c);
        if (generate->parsed()) return cmd_generate(c, ckpt);
        if (evaluate->parsed()) return cmd_evaluate(c, ckpt);
        return cmd_sweep(c);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace ddm::cli
