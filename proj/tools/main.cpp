// nfk: train models, build Fisher contexts, factor kernels, embed, probe, distill, benchmark.

#include <CLI11.hpp>
#include <algorithm>
#include <optional>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "datasets.hpp"
#include "nfk/bench.hpp"
#include "nfk/distill.hpp"
#include "nfk/embedding.hpp"
#include "nfk/errors.hpp"
#include "nfk/eval.hpp"
#include "nfk/fisher.hpp"
#include "nfk/io.hpp"
#include "nfk/lowrank.hpp"
#include "nfk/nn/model_io.hpp"
#include "nfk/nn/train.hpp"
#include "run.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace nfk::cli {
namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct Common {
    std::string out;
    std::size_t threads = 0;
    std::uint64_t seed = 0;
};

void add_common(CLI::App* cmd, Common& c, bool seeded) {
    cmd->add_option("--out", c.out, "Output directory")->required();
    cmd->add_option("--threads", c.threads, "Worker threads (0: NFK_THREADS or hardware)")->capture_default_str();
    if (seeded) cmd->add_option("--seed", c.seed, "Root seed")->required();
}

Parallelism parallelism(const Common& c) {
    Parallelism p;
    p.threads = resolve_threads(c.threads);
    return p;
}

std::string history_csv(const std::vector<nn::EpochLog>& history) {
    std::ostringstream s;
    s << "epoch,loss,accuracy,learning_rate\n";
    for (const auto& e : history) {
        s << e.epoch << ',' << io::format_double(e.loss) << ',' << io::format_double(e.accuracy) << ','
          << io::format_double(e.learning_rate) << '\n';
    }
    return s.str();
}

nn::ModelSpec mlp_from(const std::string& widths, const std::string& activation, nn::Family family) {
    const auto w = parse_sizes(widths, "widths");
    if (w.size() < 2) throw ConfigError("widths need at least an input and an output size");
    return nn::ModelSpec::mlp(family, w, nn::activation_from_string(activation));
}

// ---- train ----------------------------------------------------------------

struct TrainOpts {
    std::string objective = "auto";
    std::string optimizer = "adam";
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::string milestones;
    double gamma = 0.1;
    std::size_t vae_samples = 1;
};

void add_train_options(CLI::App* cmd, TrainOpts& t) {
    cmd->add_option("--objective", t.objective, "cross-entropy, bce, mse, elbo, gan-nonsaturating or auto")
        ->capture_default_str();
    cmd->add_option("--optimizer", t.optimizer, "adam or sgd+momentum")->capture_default_str();
    cmd->add_option("--lr", t.lr, "Learning rate")->capture_default_str();
    cmd->add_option("--momentum", t.momentum)->capture_default_str();
    cmd->add_option("--weight-decay", t.weight_decay)->capture_default_str();
    cmd->add_option("--epochs", t.epochs)->capture_default_str();
    cmd->add_option("--batch-size", t.batch_size)->capture_default_str();
    cmd->add_option("--milestones", t.milestones, "Comma-separated epochs where the rate decays")
        ->capture_default_str();
    cmd->add_option("--gamma", t.gamma, "Decay factor at each milestone")->capture_default_str();
    cmd->add_option("--vae-samples", t.vae_samples, "Latent draws per example per step")->capture_default_str();
}

nn::TrainConfig train_config(const TrainOpts& t, const Common& c, nn::Family family) {
    nn::TrainConfig cfg;
    if (t.objective == "auto") {
        switch (family) {
            case nn::Family::classifier: cfg.objective = nn::Objective::cross_entropy; break;
            case nn::Family::vae: cfg.objective = nn::Objective::elbo; break;
            case nn::Family::gan_discriminator: cfg.objective = nn::Objective::gan_nonsaturating; break;
            case nn::Family::ebm: cfg.objective = nn::Objective::mse; break;
            case nn::Family::gan_generator: throw ConfigError("train the discriminator family for GANs");
        }
    } else {
        cfg.objective = nn::objective_from_string(t.objective);
    }
    cfg.optimizer.kind = nn::optimizer_from_string(t.optimizer);
    cfg.optimizer.learning_rate = t.lr;
    cfg.optimizer.momentum = t.momentum;
    cfg.optimizer.weight_decay = t.weight_decay;
    cfg.schedule.epochs = t.epochs;
    cfg.schedule.batch_size = t.batch_size;
    cfg.schedule.milestones = parse_sizes(t.milestones, "milestones");
    cfg.schedule.gamma = t.gamma;
    cfg.seed = c.seed;
    cfg.parallelism = parallelism(c);
    cfg.vae_samples = t.vae_samples;
    return cfg;
}

struct TrainCmd {
    Common c;
    TrainOpts t;
    std::string data;
    std::string family = "classifier";
    std::string widths;
    std::string activation = "relu";
    std::string decoder_widths;
    std::string generator_widths;
    std::string generator_activation = "tanh";
};

void setup_train(CLI::App& app, TrainCmd& o) {
    auto* cmd = app.add_subcommand("train", "Train a classifier, EBM, VAE or GAN");
    add_common(cmd, o.c, true);
    add_train_options(cmd, o.t);
    cmd->add_option("--data", o.data, "Dataset descriptor")->required();
    cmd->add_option("--family", o.family, "classifier, ebm, vae or gan-discriminator")->capture_default_str();
    cmd->add_option("--widths", o.widths, "Layer widths, e.g. 784,32,2 (VAE: encoder up to 2*latent)")->required();
    cmd->add_option("--activation", o.activation, "Hidden activation: relu, tanh, identity")->capture_default_str();
    cmd->add_option("--decoder-widths", o.decoder_widths, "VAE decoder widths, latent first")
        ->capture_default_str();
    cmd->add_option("--generator-widths", o.generator_widths, "GAN generator widths, noise first")
        ->capture_default_str();
    cmd->add_option("--generator-activation", o.generator_activation)->capture_default_str();
}

void run_train(const CLI::App& cmd, const TrainCmd& o) {
    Run run(cmd, o.c.out);
    const LoadedDataset ds = load_dataset(o.data);
    run.input("data", ds.record);

    const nn::Family family = nn::family_from_string(o.family);
    nn::ModelSpec spec = mlp_from(o.widths, o.activation, family);
    std::optional<nn::ModelSpec> generator;
    if (family == nn::Family::vae) {
        if (o.decoder_widths.empty()) throw ConfigError("a vae needs --decoder-widths");
        const nn::ModelSpec dec = mlp_from(o.decoder_widths, o.activation, nn::Family::vae);
        spec.decoder = dec.layers;
        spec.latent_dim = dec.input_dim();
    } else if (family == nn::Family::gan_discriminator) {
        if (o.generator_widths.empty()) throw ConfigError("a GAN needs --generator-widths");
        generator = mlp_from(o.generator_widths, o.generator_activation, nn::Family::gan_generator);
    } else if (!o.decoder_widths.empty() || !o.generator_widths.empty()) {
        throw ConfigError("--decoder-widths and --generator-widths apply to vae and gan-discriminator only");
    }
    spec.validate();

    const nn::TrainConfig cfg = train_config(o.t, o.c, family);
    const nn::TrainResult result = nn::train(spec, ds.data.batch, cfg, generator ? &*generator : nullptr);

    json meta;
    meta["objective"] = nn::to_string(cfg.objective);
    meta["optimizer"] = nn::to_string(cfg.optimizer.kind);
    meta["epochs"] = cfg.schedule.epochs;
    meta["seed"] = cfg.seed;
    meta["data_checksum"] = ds.record["checksum"];
    if (!result.history.empty()) meta["final_loss"] = result.history.back().loss;
    nn::save_model(result.model, run.path("model.json"), meta.dump());
    io::write_text(run.path("history.csv"), history_csv(result.history));
    run.finish();

    std::cout << "trained " << nn::to_string(spec.family) << " with " << spec.param_count() << " parameters";
    if (!result.history.empty()) {
        std::cout << ", final loss " << result.history.back().loss;
        if (result.history.back().accuracy >= 0) std::cout << ", train accuracy " << result.history.back().accuracy;
    }
    std::cout << '\n';
}

// ---- fisher-context -------------------------------------------------------

struct ContextCmd {
    Common c;
    std::string model;
    std::string data;
    std::string kernel = "nfk";
    std::string head;
    std::size_t head_index = 0;
    double damping = 1e-8;
    std::size_t gan_samples = 4096;
    std::size_t vae_samples = 8;
};

void setup_context(CLI::App& app, ContextCmd& o) {
    auto* cmd = app.add_subcommand("fisher-context", "Estimate centering and diagonal FIM for a trained model");
    add_common(cmd, o.c, true);
    cmd->add_option("--model", o.model, "Model manifest")->required();
    cmd->add_option("--data", o.data, "Dataset descriptor for the expectations")->required();
    cmd->add_option("--kernel", o.kernel, "nfk or ntk")->capture_default_str();
    cmd->add_option("--head", o.head, "Override the head: logit, neg-free-energy, output, neg-energy, elbo");
    cmd->add_option("--head-index", o.head_index, "Logit index for --head logit")->capture_default_str();
    cmd->add_option("--damping", o.damping, "Relative FIM damping")->capture_default_str();
    cmd->add_option("--gan-samples", o.gan_samples)->capture_default_str();
    cmd->add_option("--vae-samples", o.vae_samples)->capture_default_str();
}

void run_context(const CLI::App& cmd, const ContextCmd& o) {
    Run run(cmd, o.c.out);
    run.input_path("model", o.model);
    const LoadedDataset ds = load_dataset(o.data);
    run.input("data", ds.record);

    fisher::FisherConfig fc;
    fc.kind = fisher::kernel_kind_from_string(o.kernel);
    if (!o.head.empty()) fc.head = nn::Head{nn::head_kind_from_string(o.head), o.head_index};
    fc.damping = o.damping;
    fc.gan_samples = o.gan_samples;
    fc.vae_samples = o.vae_samples;
    fc.seed = o.c.seed;
    fc.parallelism = parallelism(o.c);
    const auto ctx = fisher::FisherContext::build(nn::load_model(o.model), ds.data.batch, fc);
    fisher::save_context(*ctx, o.c.out);
    run.finish();
    std::cout << "context " << io::hex64(ctx->fingerprint()) << ": P = " << ctx->param_count() << ", "
              << ctx->sample_count() << " samples\n";
}

// ---- svd ------------------------------------------------------------------

struct OperatorInputs {
    std::string model;
    std::string context;
    std::string data;
};

void add_operator_options(CLI::App* cmd, OperatorInputs& o, bool required) {
    auto* m = cmd->add_option("--model", o.model, "Model manifest");
    auto* c = cmd->add_option("--context", o.context, "Fisher context directory");
    auto* d = cmd->add_option("--data", o.data, "Dataset descriptor of the examples");
    if (required) {
        m->required();
        c->required();
        d->required();
    }
}

struct LoadedOperator {
    fisher::ContextPtr ctx;
    data::Dataset data;
};

LoadedOperator load_operator(Run& run, const OperatorInputs& o) {
    if (o.model.empty() || o.context.empty() || o.data.empty()) {
        throw ConfigError("--model, --context and --data are all needed to evaluate Fisher vectors");
    }
    run.input_path("model", o.model);
    run.input_path("context", o.context);
    LoadedOperator op;
    const LoadedDataset ds = load_dataset(o.data);
    run.input("data", ds.record);
    op.data = ds.data;
    op.ctx = fisher::load_context(o.context, nn::load_model(o.model));
    return op;
}

std::string spectrum_csv(const Vector& sigma, double total) {
    std::ostringstream s;
    s << "index,sigma,sigma_squared,explained\n";
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
        const auto k = static_cast<std::size_t>(i + 1);
        const double r = total > 0 ? lowrank::explained_variance(sigma, k, total) : lowrank::explained_variance(sigma, k);
        s << k << ',' << io::format_double(sigma(i)) << ',' << io::format_double(sigma(i) * sigma(i)) << ','
          << io::format_double(r) << '\n';
    }
    return s.str();
}

struct SvdCmd {
    Common c;
    OperatorInputs in;
    std::string method = "randomized";
    std::size_t k = 32;
    std::size_t oversample = 10;
    std::size_t iters = 10;
};

void setup_svd(CLI::App& app, SvdCmd& o) {
    auto* cmd = app.add_subcommand("svd", "Truncated SVD of the Fisher-vector operator");
    add_common(cmd, o.c, true);
    add_operator_options(cmd, o.in, true);
    cmd->add_option("--method", o.method, "randomized or gram-eigh")->capture_default_str();
    cmd->add_option("--k", o.k, "Rank")->capture_default_str();
    cmd->add_option("--oversample", o.oversample)->capture_default_str();
    cmd->add_option("--iters", o.iters, "Power iterations")->capture_default_str();
}

void run_svd(const CLI::App& cmd, const SvdCmd& o) {
    Run run(cmd, o.c.out);
    const LoadedOperator lo = load_operator(run, o.in);
    fisher::FisherOperator op(lo.ctx, lo.data.batch);
    op.set_parallelism(parallelism(o.c));

    lowrank::SvdFactors f;
    if (o.method == "randomized") {
        lowrank::SvdOptions so;
        so.k = o.k;
        so.oversample = o.oversample;
        so.iters = o.iters;
        so.seed = o.c.seed;
        f = lowrank::truncated_svd(op, so);
    } else if (o.method == "gram-eigh") {
        f = lowrank::gram_eigh_baseline(op, o.k);
    } else {
        throw ConfigError("unknown svd method '" + o.method + "' (randomized, gram-eigh)");
    }
    lowrank::save_factors(f, o.c.out);
    io::write_text(run.path("spectrum.csv"), spectrum_csv(f.sigma, 0.0));
    std::ostringstream res;
    res << "iteration,residual\n";
    for (std::size_t i = 0; i < f.residuals.size(); ++i) {
        res << i + 1 << ',' << io::format_double(f.residuals[i]) << '\n';
    }
    io::write_text(run.path("residuals.csv"), res.str());
    run.finish();
    std::cout << "rank " << f.rank() << " factors, sigma_1 = " << f.sigma(0) << ", fingerprint "
              << io::hex64(f.fingerprint()) << '\n';
}

// ---- embed ----------------------------------------------------------------

struct EmbedCmd {
    Common c;
    OperatorInputs in;
    std::string factors;
};

void setup_embed(CLI::App& app, EmbedCmd& o) {
    auto* cmd = app.add_subcommand("embed", "NFK embeddings of the anchors, or of new points with --data");
    add_common(cmd, o.c, false);
    add_operator_options(cmd, o.in, false);
    cmd->add_option("--factors", o.factors, "Factor store directory")->required();
}

void run_embed(const CLI::App& cmd, const EmbedCmd& o) {
    Run run(cmd, o.c.out);
    run.input_path("factors", o.factors);
    const lowrank::SvdFactors f = lowrank::load_factors(o.factors);
    embedding::EmbeddingSet e;
    if (o.in.data.empty()) {
        e = embedding::embed_train(f);
    } else {
        const LoadedOperator lo = load_operator(run, o.in);
        fisher::FisherOperator op(lo.ctx, lo.data.batch);
        op.set_parallelism(parallelism(o.c));
        e = embedding::embed_points(op, f, lo.data.batch);
    }
    embedding::save_embeddings(e, o.c.out);
    run.finish();
    std::cout << e.size() << " embeddings of dimension " << e.dim() << '\n';
}

// ---- spectrum -------------------------------------------------------------

struct SpectrumCmd {
    Common c;
    std::string factors;
    OperatorInputs in;
};

void setup_spectrum(CLI::App& app, SpectrumCmd& o) {
    auto* cmd = app.add_subcommand(
        "spectrum", "Singular values and explained variance; with --model/--context/--data the ratio uses the exact total");
    cmd->add_option("--out", o.c.out, "Output directory")->required();
    cmd->add_option("--threads", o.c.threads)->capture_default_str();
    cmd->add_option("--factors", o.factors, "Factor store directory")->required();
    add_operator_options(cmd, o.in, false);
}

void run_spectrum(const CLI::App& cmd, const SpectrumCmd& o) {
    Run run(cmd, o.c.out);
    run.input_path("factors", o.factors);
    const lowrank::SvdFactors f = lowrank::load_factors(o.factors);
    double total = 0.0;
    const int given = !o.in.model.empty() + !o.in.context.empty() + !o.in.data.empty();
    if (given == 3) {
        const LoadedOperator lo = load_operator(run, o.in);
        fisher::FisherOperator op(lo.ctx, lo.data.batch);
        op.set_parallelism(parallelism(o.c));
        if (op.fingerprint() != f.meta.context_fingerprint || op.data_digest() != f.meta.data_digest) {
            throw DataError("spectrum: factors were not computed on this context and data");
        }
        total = op.squared_norm();
    } else if (given != 0) {
        throw ConfigError("spectrum: give all of --model, --context and --data, or none");
    }
    io::write_text(run.path("spectrum.csv"), spectrum_csv(f.sigma, total));
    json j;
    j["k"] = f.rank();
    j["n"] = f.meta.n;
    j["p"] = f.meta.p;
    j["kernel_kind"] = f.meta.kernel_kind;
    j["total"] = total > 0 ? json(total) : json(nullptr);
    j["explained"] = total > 0 ? lowrank::explained_variance(f.sigma, f.rank(), total)
                               : lowrank::explained_variance(f.sigma, f.rank());
    io::write_text(run.path("spectrum.json"), j.dump(2) + "\n");
    run.finish();
    std::cout << "top-" << f.rank() << " explained variance " << j["explained"].get<double>()
              << (total > 0 ? "" : " (of the truncated spectrum)") << '\n';
}

// ---- probe ----------------------------------------------------------------

struct ProbeCmd {
    Common c;
    std::string train_emb;
    std::string test_emb;
    std::string data;
    std::string test_data;
    std::string mode = "ridge";
    double lambda = -1.0;
    std::string grid;
    double validation = 0.2;
    std::size_t labels_per_class = 0;
    std::string standardize = "false";
    double logistic_lr = 0.5;
    std::size_t logistic_epochs = 500;
};

void setup_probe(CLI::App& app, ProbeCmd& o) {
    auto* cmd = app.add_subcommand("probe", "Linear probe on embeddings (ridge sweep by default)");
    add_common(cmd, o.c, true);
    cmd->add_option("--train", o.train_emb, "Training embeddings directory")->required();
    cmd->add_option("--test", o.test_emb, "Test embeddings directory");
    cmd->add_option("--data", o.data, "Dataset descriptor with the training labels")->required();
    cmd->add_option("--test-data", o.test_data, "Dataset descriptor with the test labels");
    cmd->add_option("--mode", o.mode, "ridge or logistic")->capture_default_str();
    cmd->add_option("--lambda", o.lambda, "Fixed penalty; negative runs the ridge sweep")->capture_default_str();
    cmd->add_option("--lambda-grid", o.grid, "Comma-separated sweep grid (default 1e-6..1e2)");
    cmd->add_option("--validation", o.validation, "Validation fraction for the sweep")->capture_default_str();
    cmd->add_option("--labels-per-class", o.labels_per_class, "Train on m labels per class (0: all)")
        ->capture_default_str();
    cmd->add_option("--standardize", o.standardize, "true or false")->capture_default_str();
    cmd->add_option("--logistic-lr", o.logistic_lr)->capture_default_str();
    cmd->add_option("--logistic-epochs", o.logistic_epochs)->capture_default_str();
}

bool parse_bool(const std::string& s, const std::string& what) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(what + " must be true or false");
}

json probe_json(const eval::ProbeResult& r) {
    return {{"mode", eval::to_string(r.mode)},
            {"lambda", r.lambda},
            {"train_accuracy", r.train_accuracy},
            {"test_accuracy", r.test_accuracy},
            {"labels_per_class", r.labels_per_class},
            {"classes", r.classes}};
}

struct Labelled {
    Matrix e;
    std::vector<int> y;
};

Labelled labelled(Run& run, const std::string& key, const std::string& emb_dir, const std::string& descriptor) {
    run.input_path(key + "_embeddings", emb_dir);
    const embedding::EmbeddingSet e = embedding::load_embeddings(emb_dir);
    const LoadedDataset ds = load_dataset(descriptor);
    run.input(key + "_data", ds.record);
    if (!ds.data.batch.has_labels()) throw DataError(key + " dataset has no labels");
    if (ds.data.batch.size() != e.size()) {
        throw DataError(key + " embeddings have " + std::to_string(e.size()) + " rows, dataset has " +
                        std::to_string(ds.data.batch.size()));
    }
    return {e.vectors, ds.data.batch.labels};
}

void run_probe(const CLI::App& cmd, const ProbeCmd& o) {
    Run run(cmd, o.c.out);
    if (o.test_emb.empty() != o.test_data.empty()) throw ConfigError("--test and --test-data go together");
    Labelled train = labelled(run, "train", o.train_emb, o.data);
    Labelled test;
    if (!o.test_emb.empty()) test = labelled(run, "test", o.test_emb, o.test_data);

    if (o.labels_per_class > 0) {
        const auto idx = eval::subsample_labels(train.y, o.labels_per_class, RngStream(o.c.seed).derive(1));
        Labelled sub{Matrix(static_cast<Eigen::Index>(idx.size()), train.e.cols()), {}};
        for (std::size_t i = 0; i < idx.size(); ++i) {
            sub.e.row(static_cast<Eigen::Index>(i)) = train.e.row(static_cast<Eigen::Index>(idx[i]));
            sub.y.push_back(train.y[idx[i]]);
        }
        train = std::move(sub);
    }

    const bool standardize = parse_bool(o.standardize, "--standardize");
    json results;
    std::ostringstream csv;
    csv << "lambda,validation_accuracy,train_accuracy,test_accuracy,selected\n";
    eval::ProbeResult chosen;
    if (o.lambda >= 0.0 || o.mode == "logistic") {
        eval::ProbeOptions po;
        po.mode = eval::probe_mode_from_string(o.mode);
        po.lambda = o.lambda >= 0.0 ? o.lambda : po.lambda;
        po.standardize = standardize;
        po.logistic.learning_rate = o.logistic_lr;
        po.logistic.epochs = o.logistic_epochs;
        chosen = eval::linear_probe(train.e, train.y, test.e, test.y, po);
        csv << io::format_double(chosen.lambda) << ",," << io::format_double(chosen.train_accuracy) << ','
            << io::format_double(chosen.test_accuracy) << ",1\n";
    } else {
        if (o.mode != "ridge") throw ConfigError("unknown probe mode '" + o.mode + "'");
        const std::vector<double> grid =
            o.grid.empty() ? eval::default_lambda_grid() : parse_doubles(o.grid, "--lambda-grid");
        const eval::SweepResult sw =
            eval::ridge_sweep(train.e, train.y, test.e, test.y, grid, o.validation, o.c.seed, standardize);
        for (std::size_t i = 0; i < sw.grid.size(); ++i) {
            csv << io::format_double(sw.grid[i].lambda) << ',' << io::format_double(sw.validation_accuracy[i]) << ','
                << io::format_double(sw.grid[i].train_accuracy) << ',' << io::format_double(sw.grid[i].test_accuracy)
                << ',' << (i == sw.best ? 1 : 0) << '\n';
            results["sweep"].push_back(probe_json(sw.grid[i]));
            results["sweep"].back()["validation_accuracy"] = sw.validation_accuracy[i];
        }
        results["lambda_scale"] = sw.lambda_scale;
        chosen = sw.grid[sw.best];
    }
    chosen.labels_per_class = o.labels_per_class;
    results["selected"] = probe_json(chosen);
    io::write_text(run.path("probe.json"), results.dump(2) + "\n");
    io::write_text(run.path("probe.csv"), csv.str());
    run.finish();
    std::cout << "lambda " << chosen.lambda << ": train accuracy " << chosen.train_accuracy;
    if (chosen.test_accuracy >= 0) std::cout << ", test accuracy " << chosen.test_accuracy;
    std::cout << '\n';
}

// ---- krr ------------------------------------------------------------------

struct KrrCmd {
    Common c;
    std::string train_emb;
    std::string test_emb;
    std::string data;
    std::string test_data;
    double lambda = 1e-3;
};

void setup_krr(CLI::App& app, KrrCmd& o) {
    auto* cmd = app.add_subcommand("krr", "Kernel ridge regression on one-hot labels with the low-rank kernel");
    add_common(cmd, o.c, false);
    cmd->add_option("--train", o.train_emb, "Training embeddings directory")->required();
    cmd->add_option("--test", o.test_emb, "Query embeddings directory")->required();
    cmd->add_option("--data", o.data, "Dataset descriptor with the training labels")->required();
    cmd->add_option("--test-data", o.test_data, "Dataset descriptor with the query labels")->required();
    cmd->add_option("--lambda", o.lambda)->capture_default_str();
}

void run_krr(const CLI::App& cmd, const KrrCmd& o) {
    Run run(cmd, o.c.out);
    const Labelled train = labelled(run, "train", o.train_emb, o.data);
    const Labelled test = labelled(run, "test", o.test_emb, o.test_data);
    const int max_label = std::max(*std::max_element(train.y.begin(), train.y.end()),
                                   *std::max_element(test.y.begin(), test.y.end()));
    const auto classes = static_cast<std::size_t>(max_label + 1);
    const Matrix pred = eval::krr_predict(train.e, eval::one_hot(train.y, classes), o.lambda, test.e);

    std::vector<int> predicted(test.y.size());
    std::ostringstream csv;
    csv << "row,label,predicted\n";
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        Eigen::Index best = 0;
        pred.row(i).maxCoeff(&best);
        predicted[static_cast<std::size_t>(i)] = static_cast<int>(best);
        csv << i << ',' << test.y[static_cast<std::size_t>(i)] << ',' << best << '\n';
    }
    const double acc = eval::accuracy(predicted, test.y);
    io::write_matrix(run.path("predictions.bin"), pred);
    io::write_text(run.path("predictions.csv"), csv.str());
    io::write_text(run.path("krr.json"),
                   json{{"lambda", o.lambda}, {"classes", classes}, {"rows", pred.rows()}, {"accuracy", acc}}.dump(2) +
                       "\n");
    run.finish();
    std::cout << "krr accuracy " << acc << '\n';
}

// ---- distill --------------------------------------------------------------

struct DistillCmd {
    Common c;
    TrainOpts t;
    std::string factors;
    std::string data;
    std::string test_data;
    std::string widths;
    std::string activation = "relu";
    double alpha = 0.5;
    std::string zscore = "true";
};

void setup_distill(CLI::App& app, DistillCmd& o) {
    auto* cmd = app.add_subcommand("distill", "Train a student against a teacher's NFK embeddings");
    add_common(cmd, o.c, true);
    add_train_options(cmd, o.t);
    cmd->add_option("--factors", o.factors, "Teacher factor store, computed on --data")->required();
    cmd->add_option("--data", o.data, "Training dataset descriptor")->required();
    cmd->add_option("--test-data", o.test_data, "Dataset descriptor for test accuracy");
    cmd->add_option("--widths", o.widths, "Student widths, e.g. 784,32,10")->required();
    cmd->add_option("--activation", o.activation)->capture_default_str();
    cmd->add_option("--alpha", o.alpha, "Weight of the classification loss")->capture_default_str();
    cmd->add_option("--zscore", o.zscore, "Standardize teacher targets (true or false)")->capture_default_str();
}

void run_distill(const CLI::App& cmd, const DistillCmd& o) {
    Run run(cmd, o.c.out);
    run.input_path("factors", o.factors);
    const lowrank::SvdFactors f = lowrank::load_factors(o.factors);
    const LoadedDataset ds = load_dataset(o.data);
    run.input("data", ds.record);

    const nn::ModelSpec student = mlp_from(o.widths, o.activation, nn::Family::classifier);
    distill::DistillConfig dc;
    dc.alpha = o.alpha;
    dc.train = train_config(o.t, o.c, nn::Family::classifier);
    const distill::TeacherTargets targets =
        distill::teacher_targets(f, ds.data.batch, parse_bool(o.zscore, "--zscore"));
    const distill::DistillResult r = distill::distill_train(targets, student, ds.data.batch, dc);

    json meta{{"alpha", o.alpha}, {"teacher_factors", io::hex64(targets.factor_fingerprint)}, {"seed", o.c.seed}};
    nn::save_model(r.student, run.path("model.json"), meta.dump());
    io::write_matrix(run.path("head.bin"), r.head);
    io::write_text(run.path("history.csv"), history_csv(r.history));
    json res{{"alpha", o.alpha},
             {"k", f.rank()},
             {"head_rows", r.head.rows()},
             {"head_cols", r.head.cols()},
             {"train_accuracy", nn::accuracy(student, r.student.params, ds.data.batch)}};
    if (!o.test_data.empty()) {
        const LoadedDataset test = load_dataset(o.test_data);
        run.input("test_data", test.record);
        res["test_accuracy"] = nn::accuracy(student, r.student.params, test.data.batch);
    }
    io::write_text(run.path("distill.json"), res.dump(2) + "\n");
    run.finish();
    std::cout << "student train accuracy " << res["train_accuracy"].get<double>();
    if (res.contains("test_accuracy")) std::cout << ", test accuracy " << res["test_accuracy"].get<double>();
    std::cout << '\n';
}

// ---- bench ----------------------------------------------------------------

struct BenchCmd {
    Common c;
    OperatorInputs in;
    std::string sizes;
    std::size_t k = 32;
    std::size_t oversample = 10;
    std::size_t iters = 10;
};

void setup_bench(CLI::App& app, BenchCmd& o) {
    auto* cmd = app.add_subcommand("bench", "Wall time of truncated_svd on growing prefixes of the data");
    add_common(cmd, o.c, true);
    add_operator_options(cmd, o.in, true);
    cmd->add_option("--sizes", o.sizes, "Ascending prefix sizes, e.g. 1024,2048,4096")->required();
    cmd->add_option("--k", o.k)->capture_default_str();
    cmd->add_option("--oversample", o.oversample)->capture_default_str();
    cmd->add_option("--iters", o.iters)->capture_default_str();
}

void run_bench(const CLI::App& cmd, const BenchCmd& o) {
    Run run(cmd, o.c.out);
    const LoadedOperator lo = load_operator(run, o.in);
    lowrank::SvdOptions so;
    so.k = o.k;
    so.oversample = o.oversample;
    so.iters = o.iters;
    so.seed = o.c.seed;
    const auto rows = bench::bench_scaling(lo.ctx, lo.data.batch, parse_sizes(o.sizes, "--sizes"), so);

    // Timings go to timing.csv; bench.json holds only the numerical outputs.
    io::write_text(run.path("timing.csv"), bench::scaling_csv(rows));
    json j = json::array();
    for (const auto& r : rows) {
        json row{{"n", r.n}, {"sigma", std::vector<double>(r.sigma.data(), r.sigma.data() + r.sigma.size())}};
        j.push_back(row);
    }
    io::write_text(run.path("bench.json"), j.dump(2) + "\n");
    run.finish();
    for (const auto& r : rows) {
        std::cout << "n = " << r.n << ": " << r.seconds << " s";
        if (r.ratio > 0) std::cout << " (x" << r.ratio << ")";
        std::cout << '\n';
    }
}

int exit_with(int code, const std::string& kind, const std::string& what) {
    std::cerr << "nfk: " << kind << ": " << what << '\n';
    return code;
}

}  // namespace
}  // namespace nfk::cli

int main(int argc, char** argv) {
    using namespace nfk::cli;
    CLI::App app{"Neural Fisher kernel toolkit"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.set_version_flag("--version", "nfk 0.1.0");
    app.footer(
        "Every command accepts --config FILE (a JSON object keyed by option name); flags on the command line "
        "override it.\nExit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.");

    TrainCmd train;
    ContextCmd context;
    SvdCmd svd;
    EmbedCmd embed;
    SpectrumCmd spectrum;
    ProbeCmd probe;
    KrrCmd krr;
    DistillCmd distill_cmd;
    BenchCmd bench_cmd;
    setup_train(app, train);
    setup_context(app, context);
    setup_svd(app, svd);
    setup_embed(app, embed);
    setup_spectrum(app, spectrum);
    setup_probe(app, probe);
    setup_krr(app, krr);
    setup_distill(app, distill_cmd);
    setup_bench(app, bench_cmd);
    for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) {
        sub->add_option("--config", "JSON config file (expanded before parsing)");
    }

    try {
        std::vector<std::string> args(argv, argv + argc);
        args = expand_config(args);
        std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
        app.parse(std::move(reversed));

        const CLI::App* cmd = app.get_subcommands().front();
        const std::string name = cmd->get_name();
        if (name == "train") run_train(*cmd, train);
        else if (name == "fisher-context") run_context(*cmd, context);
        else if (name == "svd") run_svd(*cmd, svd);
        else if (name == "embed") run_embed(*cmd, embed);
        else if (name == "spectrum") run_spectrum(*cmd, spectrum);
        else if (name == "probe") run_probe(*cmd, probe);
        else if (name == "krr") run_krr(*cmd, krr);
        else if (name == "distill") run_distill(*cmd, distill_cmd);
        else if (name == "bench") run_bench(*cmd, bench_cmd);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    } catch (const nfk::ConfigError& e) {
        return exit_with(kExitConfig, "configuration error", e.what());
    } catch (const nfk::ShapeError& e) {
        return exit_with(kExitConfig, "configuration error", e.what());
    } catch (const nfk::DataError& e) {
        return exit_with(kExitData, "data error", e.what());
    } catch (const nfk::NumericalError& e) {
        return exit_with(kExitNumerical, "numerical error", e.what());
    } catch (const std::exception& e) {
        return exit_with(kExitOther, "error", e.what());
    }
    return 0;
}
