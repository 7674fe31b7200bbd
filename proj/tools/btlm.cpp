// btlm: command-line driver for training, promotion, adaptation, evaluation
// and the oracle checks.
//
// Exit codes: 0 success, 2 usage or configuration, 3 numerical failure
// (divergence, failed oracle check), 4 I/O.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "btlm/bayes.hpp"
#include "btlm/checkpoint.hpp"
#include "btlm/config.hpp"
#include "btlm/corpus.hpp"
#include "btlm/eval.hpp"
#include "btlm/experiments.hpp"
#include "btlm/ngram.hpp"
#include "btlm/synthetic.hpp"
#include "btlm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace btlm;

namespace {

constexpr const char* kVersion = "btlm 0.1.0";

enum Exit { kOk = 0, kUsage = 2, kNumerical = 3, kIo = 4 };

// Everything a command may read from a config file or a flag.
struct Settings {
    ModelConfig model;
    BayesConfig bayes;
    TrainConfig train;
    SyntheticSpec synthetic;
    std::string eval_mode = "mean";
    std::size_t eval_samples = 1;
    std::uint64_t eval_seed = 1;

    Settings() {
        model.n_blocks = 2;
        model.d_model = 32;
        model.d_ff = 128;
        model.n_heads = 4;
        model.max_len = 128;
    }

    json to_json() const {
        return {{"model", model},
                {"bayes", bayes},
                {"train", train},
                {"synthetic", synthetic},
                {"eval", {{"mode", eval_mode}, {"samples", eval_samples}, {"seed", eval_seed}}}};
    }

    void load(const json& j) {
        check_keys(j, {"model", "bayes", "train", "synthetic", "eval"}, "config");
        if (j.contains("model")) {
            ModelConfig m = model;
            from_json(j.at("model"), m);
            model = m;
        }
        if (j.contains("bayes")) {
            BayesConfig b = bayes;
            from_json(j.at("bayes"), b);
            bayes = b;
        }
        if (j.contains("train")) {
            TrainConfig t = train;
            from_json(j.at("train"), t);
            train = t;
        }
        if (j.contains("synthetic")) {
            const auto& s = j.at("synthetic");
            check_keys(s, {"alphabet_size", "n_classes", "branching", "concentration", "min_len", "max_len", "end_prob",
                           "chain_seed", "shift_fraction", "shift_seed"},
                       "synthetic");
            SyntheticSpec d = synthetic;
            const std::string sec = "synthetic";
            read_field(s, "alphabet_size", d.alphabet_size, sec);
            read_field(s, "n_classes", d.n_classes, sec);
            read_field(s, "branching", d.branching, sec);
            read_field(s, "concentration", d.concentration, sec);
            read_field(s, "min_len", d.min_len, sec);
            read_field(s, "max_len", d.max_len, sec);
            read_field(s, "end_prob", d.end_prob, sec);
            read_field(s, "chain_seed", d.chain_seed, sec);
            read_field(s, "shift_fraction", d.shift_fraction, sec);
            read_field(s, "shift_seed", d.shift_seed, sec);
            synthetic = d;
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            check_keys(e, {"mode", "samples", "seed"}, "eval");
            read_field(e, "mode", eval_mode, "eval");
            read_field(e, "samples", eval_samples, "eval");
            read_field(e, "seed", eval_seed, "eval");
        }
    }

    Predictive predictive() const {
        return Predictive{eval_mode_from_string(eval_mode), eval_samples, eval_seed};
    }
};

// Flags are parsed into side storage and copied over the config-file values
// only when given, so the precedence is default < file < flag.
class Overrides {
public:
    template <class V>
    void add(CLI::App* app, const std::string& flag, V& target, const std::string& help) {
        auto holder = std::make_shared<V>();
        CLI::Option* opt = app->add_option(flag, *holder, help);
        apply_.push_back([opt, holder, &target] {
            if (opt->count()) target = *holder;
        });
    }

    void add_fn(CLI::App* app, const std::string& flag, std::function<void(const std::string&)> fn,
                const std::string& help) {
        auto holder = std::make_shared<std::string>();
        CLI::Option* opt = app->add_option(flag, *holder, help);
        apply_.push_back([opt, holder, fn] {
            if (opt->count()) fn(*holder);
        });
    }

    void apply() const {
        for (const auto& f : apply_) f();
    }

private:
    std::vector<std::function<void()>> apply_;
};

void add_model_flags(CLI::App* app, Overrides& o, Settings& s) {
    o.add(app, "--n-blocks", s.model.n_blocks, "decoder blocks");
    o.add(app, "--d-model", s.model.d_model, "model width");
    o.add(app, "--d-ff", s.model.d_ff, "feed-forward width");
    o.add(app, "--n-heads", s.model.n_heads, "attention heads");
    o.add(app, "--max-len", s.model.max_len, "longest sequence (tokens)");
    o.add(app, "--dropout-rate", s.model.dropout_rate, "dropout rate during training");
    o.add(app, "--tie-output", s.model.tie_output, "share embedding and output matrix");
    o.add(app, "--ln-eps", s.model.ln_eps, "layer-norm epsilon");
}

void add_bayes_flags(CLI::App* app, Overrides& o, Settings& s) {
    o.add_fn(
        app, "--sites",
        [&s](const std::string& v) {
            s.bayes.sites.clear();
            for (const auto& r : parse_sites(v)) s.bayes.sites.insert(r);
        },
        "Bayesian sites, e.g. 1:FF, 1-3:FF, 2:MHA, EMB");
    o.add(app, "--init-log-sigma", s.bayes.init_log_sigma, "initial posterior log std");
    o.add(app, "--prior-sigma", s.bayes.prior_sigma, "prior std");
    o.add(app, "--k-eval", s.bayes.k_eval, "samples for mc evaluation stored in the model");
}

void add_train_flags(CLI::App* app, Overrides& o, Settings& s) {
    o.add(app, "--learning-rate", s.train.learning_rate, "initial SGD learning rate");
    o.add(app, "--lr-decay", s.train.lr_decay, "factor applied when dev perplexity stalls");
    o.add(app, "--lr-floor", s.train.lr_floor, "smallest learning rate");
    o.add(app, "--batch-size", s.train.batch_size, "sentences per batch");
    o.add(app, "--epochs", s.train.epochs, "training epochs");
    o.add(app, "--k-train", s.train.k_train, "weight samples per ELBO evaluation");
    o.add_fn(
        app, "--kl-scale-mode", [&s](const std::string& v) { s.train.kl_scale_mode = kl_scale_mode_from_string(v); },
        "batch_fraction or constant");
    o.add(app, "--kl-weight", s.train.kl_weight, "KL multiplier in constant mode");
    o.add(app, "--clip-norm", s.train.clip_norm, "global gradient-norm clip (0 disables)");
    o.add(app, "--seed", s.train.seed, "random seed");
    o.add(app, "--normalize-by-tokens", s.train.normalize_by_tokens, "divide batch loss by its token count");
    o.add(app, "--concat-sentences", s.train.concat_sentences, "pack sentences into shared windows");
    o.add(app, "--finetune-lr", s.train.finetune_lr, "learning rate for adaptation");
}

void add_eval_flags(CLI::App* app, Overrides& o, Settings& s) {
    o.add(app, "--eval-mode", s.eval_mode, "mean or mc");
    o.add(app, "--samples", s.eval_samples, "weight samples for mc evaluation");
    o.add(app, "--eval-seed", s.eval_seed, "seed of the mc weight draws");
}

void add_synthetic_flags(CLI::App* app, Overrides& o, Settings& s) {
    o.add(app, "--alphabet-size", s.synthetic.alphabet_size, "symbols in the source");
    o.add(app, "--n-classes", s.synthetic.n_classes, "symbol classes");
    o.add(app, "--branching", s.synthetic.branching, "successors per context (0 = uniform)");
    o.add(app, "--concentration", s.synthetic.concentration, "Dirichlet concentration of successor weights");
    o.add(app, "--min-words", s.synthetic.min_len, "shortest sentence");
    o.add(app, "--max-words", s.synthetic.max_len, "longest sentence");
    o.add(app, "--end-prob", s.synthetic.end_prob, "end probability after min-words");
    o.add(app, "--chain-seed", s.synthetic.chain_seed, "seed of the transition tables");
    o.add(app, "--shift-fraction", s.synthetic.shift_fraction, "fraction of redrawn contexts");
    o.add(app, "--shift-seed", s.synthetic.shift_seed, "seed of the redrawn contexts");
}

// ---------------------------------------------------------------------------
// Run directories and manifests.

struct Run {
    std::string dir;
    json manifest;

    std::string path(const std::string& leaf) const { return (fs::path(dir) / leaf).string(); }

    void input(const std::string& role, const std::string& p) {
        manifest["inputs"].push_back({{"role", role}, {"path", p}, {"fnv1a64", file_checksum(p)}});
    }
    void output(const std::string& leaf) {
        manifest["outputs"].push_back({{"path", path(leaf)}, {"fnv1a64", file_checksum(path(leaf))}});
    }
    void write_manifest() const {
        std::ofstream os(path("manifest.json"));
        if (!os) throw IoError("cannot write '" + path("manifest.json") + "'");
        os << manifest.dump(2) << '\n';
    }
};

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

struct Common {
    std::string config_path;
    std::string run_root;
    std::string run_dir;
};

Run open_run(const Common& c, const std::string& command, std::uint64_t seed, const json& config,
             const std::vector<std::string>& argv) {
    Run r;
    if (!c.run_dir.empty()) {
        r.dir = c.run_dir;
    } else {
        const std::string root = c.run_root.empty() ? (std::getenv("BTLM_RUN_ROOT") ? std::getenv("BTLM_RUN_ROOT") : "runs")
                                                    : c.run_root;
        const std::string base = (fs::path(root) / (timestamp() + "-seed" + std::to_string(seed))).string();
        r.dir = base;
        for (int n = 2; fs::exists(r.dir); ++n) r.dir = base + "-" + std::to_string(n);
    }
    std::error_code ec;
    fs::create_directories(r.dir, ec);
    if (ec) throw IoError("cannot create run directory '" + r.dir + "': " + ec.message());
    r.manifest = {{"command", command}, {"argv", argv},  {"config", config},
                  {"seed", seed},       {"version", kVersion}, {"inputs", json::array()},
                  {"outputs", json::array()}};
    return r;
}

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError(what + " path is required");
    if (!fs::is_regular_file(path)) throw ConfigError(what + " '" + path + "' does not exist");
}

json load_json_file(const std::string& path) {
    require_file(path, "config");
    std::ifstream is(path);
    if (!is) throw IoError("cannot read '" + path + "'");
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::vector<Sentence> read_corpus(const std::string& path, const Vocabulary& vocab, std::size_t* oov = nullptr) {
    require_file(path, "corpus");
    return tokenize_all(read_lines(path), vocab, oov);
}

void write_metrics(const std::string& path, const std::vector<EpochMetrics>& history) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write '" + path + "'");
    for (const auto& m : history) os << m.to_json().dump() << '\n';
}

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code.

struct Cli {
    CLI::App app{"Bayesian Transformer language-model toolkit"};
    Settings settings;
    Overrides overrides;
    Common common;
    std::vector<std::string> argv;
    std::function<int()> action;

    // Per-command arguments.
    std::string train_path, dev_path, test_path, vocab_path, corpus_path, checkpoint, init_path, prior_path, ref_path,
        ngram_path, nbest_path, mode = "fine_tune", out_dir, smoothing = "kn";
    std::size_t n_train = 2000, n_dev = 500, n_test = 500, max_size = 0, min_count = 1, order = 4;
    double lambda = -1, lm_scale = 1.0, wip = 0.0, tolerance = -1, step = 1e-5;
    bool grid = false, with_dropout = false;
    std::vector<std::size_t> widths{64, 256, 1024};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::size_t stage1_epochs = 20, stage2_epochs = 10, kl_samples = 10'000'000, kl_sites = 20, kl_dim = 4;

    CLI::App* sub(const std::string& name, const std::string& help) {
        auto* s = app.add_subcommand(name, help);
        s->add_option("--config", common.config_path, "JSON config with model/bayes/train/eval/synthetic sections");
        s->add_option("--run-root", common.run_root, "parent of the run directory (default $BTLM_RUN_ROOT or ./runs)");
        s->add_option("--run-dir", common.run_dir, "explicit run directory");
        return s;
    }

    void resolve() {
        if (!common.config_path.empty()) settings.load(load_json_file(common.config_path));
        overrides.apply();
    }

    Run run(const std::string& command) {
        return open_run(common, command, settings.train.seed, settings.to_json(), argv);
    }

    Vocabulary load_vocab() {
        require_file(vocab_path, "vocabulary");
        return Vocabulary::load(vocab_path);
    }

    TransformerLM<double> load_model(const std::string& path, const std::string& what) {
        require_file(path, what);
        return load_checkpoint<double>(path);
    }

    Cli() {
        app.require_subcommand(1);
        app.set_version_flag("--version", kVersion);

        {
            auto* s = sub("gen-synth", "generate a synthetic order-2 Markov corpus with train/dev/test splits");
            add_synthetic_flags(s, overrides, settings);
            overrides.add(s, "--seed", settings.train.seed, "sampling seed");
            s->add_option("--train-sentences", n_train);
            s->add_option("--dev-sentences", n_dev);
            s->add_option("--test-sentences", n_test);
            action_for(s, [this] { return cmd_gen_synth(); });
        }
        {
            auto* s = sub("build-vocab", "build a frequency-ranked vocabulary");
            s->add_option("--corpus", corpus_path, "training text, one sentence per line")->required();
            s->add_option("--max-size", max_size, "keep at most this many words (0 = all)");
            s->add_option("--min-count", min_count, "drop words seen fewer times");
            action_for(s, [this] { return cmd_build_vocab(); });
        }
        {
            auto* s = sub("ngram-train", "estimate a backoff n-gram model and write ARPA");
            s->add_option("--corpus", corpus_path)->required();
            s->add_option("--vocab", vocab_path, "vocabulary file (built from the corpus when omitted)");
            s->add_option("--order", order);
            s->add_option("--smoothing", smoothing, "kn or additive");
            action_for(s, [this] { return cmd_ngram_train(); });
        }
        {
            auto* s = sub("train", "train a model (deterministic or Bayesian) and keep the best checkpoint");
            add_model_flags(s, overrides, settings);
            add_bayes_flags(s, overrides, settings);
            add_train_flags(s, overrides, settings);
            s->add_option("--train", train_path)->required();
            s->add_option("--dev", dev_path)->required();
            s->add_option("--vocab", vocab_path, "vocabulary (built from --train when omitted)");
            s->add_option("--init", init_path, "start from this checkpoint instead of a fresh model");
            action_for(s, [this] { return cmd_train(); });
        }
        {
            auto* s = sub("promote", "place selected weights of a checkpoint under variational estimation");
            add_bayes_flags(s, overrides, settings);
            s->add_option("--checkpoint", checkpoint)->required();
            s->add_option("--prior", prior_path, "checkpoint providing prior means (default: --checkpoint)");
            action_for(s, [this] { return cmd_promote(); });
        }
        {
            auto* s = sub("adapt", "adapt a pretrained model to a target corpus");
            add_bayes_flags(s, overrides, settings);
            add_train_flags(s, overrides, settings);
            s->add_option("--checkpoint", checkpoint, "pretrained source model")->required();
            s->add_option("--vocab", vocab_path, "source vocabulary")->required();
            s->add_option("--train", train_path)->required();
            s->add_option("--dev", dev_path)->required();
            s->add_option("--mode", mode, "none, fine_tune or bayes_adapt");
            s->add_option("--reference", ref_path, "bayes_adapt prior checkpoint (the fine-tuned model)");
            action_for(s, [this] { return cmd_adapt(); });
        }
        {
            auto* s = sub("eval", "perplexity of a corpus, optionally interpolated with an n-gram model");
            add_eval_flags(s, overrides, settings);
            s->add_option("--checkpoint", checkpoint)->required();
            s->add_option("--vocab", vocab_path)->required();
            s->add_option("--corpus", corpus_path)->required();
            s->add_option("--ngram", ngram_path, "ARPA partner model");
            s->add_option("--lambda", lambda, "neural weight in [0,1] (needs --ngram)");
            action_for(s, [this] { return cmd_eval(); });
        }
        {
            auto* s = sub("interpolate", "tune the neural/n-gram interpolation weight on dev");
            add_eval_flags(s, overrides, settings);
            s->add_option("--checkpoint", checkpoint)->required();
            s->add_option("--vocab", vocab_path)->required();
            s->add_option("--ngram", ngram_path)->required();
            s->add_option("--dev", dev_path)->required();
            s->add_option("--test", test_path, "also report this corpus at the tuned weight");
            s->add_flag("--grid", grid, "coarse grid {0.1..0.9} instead of golden-section search");
            action_for(s, [this] { return cmd_interpolate(); });
        }
        {
            auto* s = sub("rescore", "rerank N-best hypotheses with the language model");
            add_eval_flags(s, overrides, settings);
            s->add_option("--nbest", nbest_path, "utt<TAB>acoustic[<TAB>old_lm]<TAB>words")->required();
            s->add_option("--checkpoint", checkpoint)->required();
            s->add_option("--vocab", vocab_path)->required();
            s->add_option("--ngram", ngram_path);
            s->add_option("--lambda", lambda);
            s->add_option("--lm-scale", lm_scale);
            s->add_option("--wip", wip, "word insertion penalty");
            action_for(s, [this] { return cmd_rescore(); });
        }
        {
            auto* s = sub("sweep", "dev perplexity over feed-forward widths and variants on a synthetic corpus");
            add_model_flags(s, overrides, settings);
            add_synthetic_flags(s, overrides, settings);
            s->add_option("--widths", widths)->delimiter(',');
            s->add_option("--seeds", seeds)->delimiter(',');
            s->add_option("--stage1-epochs", stage1_epochs);
            s->add_option("--stage2-epochs", stage2_epochs);
            s->add_option("--train-sentences", n_train);
            s->add_option("--dev-sentences", n_dev);
            s->add_flag("--dropout", with_dropout, "include the dropout variant");
            action_for(s, [this] { return cmd_sweep(); });
        }
        {
            auto* s = sub("grad-check", "ELBO gradients against central differences on a toy model");
            overrides.add(s, "--seed", settings.train.seed, "seed");
            add_bayes_flags(s, overrides, settings);
            s->add_option("--step", step);
            s->add_option("--tolerance", tolerance);
            action_for(s, [this] { return cmd_grad_check(); });
        }
        {
            auto* s = sub("kl-check", "closed-form KL against Monte-Carlo estimates");
            overrides.add(s, "--seed", settings.train.seed, "seed");
            s->add_option("--samples", kl_samples);
            s->add_option("--sites", kl_sites, "random sites to check");
            s->add_option("--dim", kl_dim);
            s->add_option("--tolerance", tolerance);
            action_for(s, [this] { return cmd_kl_check(); });
        }
    }

    void action_for(CLI::App* s, std::function<int()> fn) {
        s->callback([this, fn] { action = fn; });
    }

    int cmd_gen_synth() {
        resolve();
        settings.synthetic.validate();
        auto r = run("gen-synth");
        const auto c = generate_synthetic(settings.synthetic, settings.train.seed, n_train, n_dev, n_test);
        save_split_corpus(c, r.dir);
        write_lines(r.path("train.txt"), c.train);
        write_lines(r.path("dev.txt"), c.dev);
        write_lines(r.path("test.txt"), c.test);
        const SyntheticSource src(settings.synthetic);
        json stats{{"dev_true_perplexity", c.dev.empty() ? 0.0 : src.true_perplexity(c.dev)}};
        r.manifest["source"] = stats;
        for (const char* f : {"corpus.txt", "splits.json", "train.txt", "dev.txt", "test.txt"}) r.output(f);
        r.write_manifest();
        std::cout << r.dir << '\n';
        return kOk;
    }

    int cmd_build_vocab() {
        resolve();
        require_file(corpus_path, "corpus");
        auto r = run("build-vocab");
        r.input("corpus", corpus_path);
        const auto v = build_vocab(read_lines(corpus_path), max_size, min_count);
        v.save(r.path("vocab.tsv"));
        r.output("vocab.tsv");
        r.write_manifest();
        std::cout << r.path("vocab.tsv") << '\n';
        return kOk;
    }

    int cmd_ngram_train() {
        resolve();
        require_file(corpus_path, "corpus");
        auto r = run("ngram-train");
        r.input("corpus", corpus_path);
        const auto lines = read_lines(corpus_path);
        Vocabulary v;
        if (vocab_path.empty()) {
            v = build_vocab(lines);
        } else {
            v = load_vocab();
            r.input("vocab", vocab_path);
        }
        NGramSmoothing sm;
        if (smoothing == "kn") sm = NGramSmoothing::KneserNey;
        else if (smoothing == "additive") sm = NGramSmoothing::Additive;
        else throw ConfigError("--smoothing must be kn or additive");
        const auto m = train_ngram(tokenize_all(lines, v), v, order, sm);
        m.save_arpa(r.path("model.arpa"));
        v.save(r.path("vocab.tsv"));
        r.manifest["ngram"] = {{"order", order},
                               {"smoothing", m.smoothing() == NGramSmoothing::KneserNey ? "kn" : "additive"},
                               {"discounts", m.discounts()}};
        r.output("model.arpa");
        r.output("vocab.tsv");
        r.write_manifest();
        std::cout << r.path("model.arpa") << '\n';
        return kOk;
    }

    int finish_training(Run& r, TransformerLM<double>& model, const TrainResult<double>& res) {
        write_metrics(r.path("metrics.jsonl"), res.history);
        save_checkpoint(model, r.path("checkpoint.bin"), {{"best_epoch", res.best_epoch}, {"best_dev_ppl", res.best_dev_ppl}});
        r.output("metrics.jsonl");
        r.output("checkpoint.bin");
        r.manifest["result"] = {{"best_epoch", res.best_epoch},
                                {"best_dev_ppl", res.best_dev_ppl},
                                {"diverged", res.diverged},
                                {"divergence", res.divergence}};
        r.write_manifest();
        if (res.diverged) {
            std::cerr << "error: training diverged: " << res.divergence << " (last good checkpoint kept in " << r.dir
                      << ")\n";
            return kNumerical;
        }
        std::cout << r.dir << '\n';
        return kOk;
    }

    int cmd_train() {
        resolve();
        require_file(train_path, "training corpus");
        require_file(dev_path, "dev corpus");
        if (!init_path.empty()) require_file(init_path, "initial checkpoint");
        const Vocabulary vocab = vocab_path.empty() ? build_vocab(read_lines(train_path)) : load_vocab();
        const auto train_set = read_corpus(train_path, vocab);
        const auto dev_set = read_corpus(dev_path, vocab);
        TransformerLM<double> model;
        if (init_path.empty()) {
            settings.model.vocab_size = vocab.size();
            model = TransformerLM<double>(settings.model, settings.train.seed);
            if (!settings.bayes.sites.empty()) promote(model, settings.bayes);
        } else {
            model = load_model(init_path, "initial checkpoint");
            if (model.config().vocab_size != vocab.size()) {
                throw ConfigError("checkpoint vocabulary size " + std::to_string(model.config().vocab_size) +
                                  " does not match the vocabulary (" + std::to_string(vocab.size()) + ")");
            }
            settings.model = model.config();
            if (!settings.bayes.sites.empty()) promote(model, settings.bayes);
        }
        auto r = run("train");
        r.input("train", train_path);
        r.input("dev", dev_path);
        if (!vocab_path.empty()) r.input("vocab", vocab_path);
        if (!init_path.empty()) r.input("init", init_path);
        vocab.save(r.path("vocab.tsv"));
        r.output("vocab.tsv");
        const auto res = train(model, train_set, dev_set, settings.train, [](const EpochMetrics& m) {
            std::cerr << m.to_json().dump() << '\n';
        });
        return finish_training(r, model, res);
    }

    int cmd_promote() {
        resolve();
        auto model = load_model(checkpoint, "checkpoint");
        if (settings.bayes.sites.empty()) throw ConfigError("promote needs --sites");
        auto r = run("promote");
        r.input("checkpoint", checkpoint);
        const TransformerLM<double> before = model;
        if (prior_path.empty()) {
            promote(model, settings.bayes);
        } else {
            const auto prior = load_model(prior_path, "prior checkpoint");
            r.input("prior", prior_path);
            promote(model, settings.bayes, prior);
        }
        save_checkpoint(model, r.path("checkpoint.bin"), {{"promoted_sites", sites_string(settings.bayes.sites)}});
        r.output("checkpoint.bin");
        const auto diff = checkpoint_diff(before, model);
        r.manifest["changed_tensors"] = diff;
        r.write_manifest();
        std::cout << r.dir << '\n';
        return kOk;
    }

    int cmd_adapt() {
        resolve();
        auto model = load_model(checkpoint, "checkpoint");
        const Vocabulary vocab = load_vocab();
        if (model.config().vocab_size != vocab.size()) {
            throw ConfigError("checkpoint and vocabulary disagree on size (" + std::to_string(model.config().vocab_size) +
                              " vs " + std::to_string(vocab.size()) + ")");
        }
        std::size_t oov_train = 0, oov_dev = 0;
        const auto train_set = read_corpus(train_path, vocab, &oov_train);
        const auto dev_set = read_corpus(dev_path, vocab, &oov_dev);
        AdaptSpec<double> spec;
        spec.mode = adapt_mode_from_string(mode);
        spec.sites = settings.bayes;
        TransformerLM<double> reference;
        if (spec.mode == AdaptMode::BayesAdapt) {
            if (ref_path.empty()) throw ConfigError("bayes_adapt needs --reference (the fine-tuned checkpoint)");
            reference = load_model(ref_path, "reference checkpoint");
            spec.reference = &reference;
        }
        auto r = run("adapt");
        r.input("checkpoint", checkpoint);
        r.input("vocab", vocab_path);
        r.input("train", train_path);
        r.input("dev", dev_path);
        if (!ref_path.empty()) r.input("reference", ref_path);
        // Target words outside the source vocabulary are scored as <unk>.
        r.manifest["vocabulary"] = {{"oov_train_tokens", oov_train}, {"oov_dev_tokens", oov_dev}};
        if (oov_train + oov_dev > 0) {
            std::cerr << "note: " << oov_train << " train and " << oov_dev
                      << " dev target tokens are outside the source vocabulary and map to <unk>\n";
        }
        const auto res = adapt(model, train_set, dev_set, spec, settings.train,
                               [](const EpochMetrics& m) { std::cerr << m.to_json().dump() << '\n'; });
        return finish_training(r, model, res);
    }

    Scorer scorer_for(const TransformerLM<double>& model, const NGramModel* ng, double lam) {
        Scorer neural = neural_scorer(model, settings.predictive());
        if (!ng) return neural;
        return interpolated_scorer(neural, ngram_scorer(*ng), lam);
    }

    int cmd_eval() {
        resolve();
        const auto model = load_model(checkpoint, "checkpoint");
        const Vocabulary vocab = load_vocab();
        std::size_t oov = 0;
        const auto corpus = read_corpus(corpus_path, vocab, &oov);
        std::unique_ptr<NGramModel> ng;
        if (!ngram_path.empty()) {
            require_file(ngram_path, "n-gram model");
            ng = std::make_unique<NGramModel>(NGramModel::load_arpa(ngram_path, vocab));
            if (ng->vocab().size() != vocab.size()) throw ConfigError("n-gram model uses words outside the vocabulary");
            if (lambda < 0) throw ConfigError("--ngram needs --lambda");
        } else if (lambda >= 0) {
            throw ConfigError("--lambda needs --ngram");
        }
        auto r = run("eval");
        r.input("checkpoint", checkpoint);
        r.input("vocab", vocab_path);
        r.input("corpus", corpus_path);
        if (ng) r.input("ngram", ngram_path);
        auto rep = corpus_perplexity(scorer_for(model, ng.get(), lambda), corpus, corpus_path);
        rep.mode = settings.predictive().name();
        if (ng) {
            rep.lambda = lambda;
            rep.partner = ngram_path;
        }
        write_report(r, rep.to_json());
        return kOk;
    }

    void write_report(Run& r, const json& report) {
        std::ofstream os(r.path("report.json"));
        if (!os) throw IoError("cannot write '" + r.path("report.json") + "'");
        os << report.dump(2) << '\n';
        os.close();
        r.output("report.json");
        r.manifest["report"] = report;
        r.write_manifest();
        std::cout << report.dump() << '\n';
    }

    int cmd_interpolate() {
        resolve();
        const auto model = load_model(checkpoint, "checkpoint");
        const Vocabulary vocab = load_vocab();
        require_file(ngram_path, "n-gram model");
        const auto ng = NGramModel::load_arpa(ngram_path, vocab);
        if (ng.vocab().size() != vocab.size()) throw ConfigError("n-gram model uses words outside the vocabulary");
        const auto dev = read_corpus(dev_path, vocab);
        auto r = run("interpolate");
        r.input("checkpoint", checkpoint);
        r.input("vocab", vocab_path);
        r.input("ngram", ngram_path);
        r.input("dev", dev_path);
        const auto neural = neural_word_probs(model, dev, settings.predictive());
        const auto ngp = ngram_scorer(ng)(dev);
        const auto search = grid ? tune_lambda_grid(neural, ngp) : tune_lambda(neural, ngp);
        json report{{"lambda", search.lambda},
                    {"method", grid ? "grid" : "golden_section"},
                    {"dev_perplexity", search.perplexity},
                    {"dev_perplexity_neural", search.ppl_neural},
                    {"dev_perplexity_ngram", search.ppl_ngram}};
        if (!test_path.empty()) {
            const auto test = read_corpus(test_path, vocab);
            r.input("test", test_path);
            auto rep = corpus_perplexity(scorer_for(model, &ng, search.lambda), test, test_path);
            rep.mode = settings.predictive().name();
            rep.lambda = search.lambda;
            rep.partner = ngram_path;
            report["test"] = rep.to_json();
        }
        write_report(r, report);
        return kOk;
    }

    int cmd_rescore() {
        resolve();
        require_file(nbest_path, "N-best list");
        const auto model = load_model(checkpoint, "checkpoint");
        const Vocabulary vocab = load_vocab();
        std::unique_ptr<NGramModel> ng;
        if (!ngram_path.empty()) {
            require_file(ngram_path, "n-gram model");
            ng = std::make_unique<NGramModel>(NGramModel::load_arpa(ngram_path, vocab));
            if (lambda < 0) throw ConfigError("--ngram needs --lambda");
        }
        std::ifstream is(nbest_path);
        if (!is) throw IoError("cannot read '" + nbest_path + "'");
        std::vector<std::string> warnings;
        const auto lists = parse_nbest(is, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << nbest_path << ": " << w << '\n';
        auto r = run("rescore");
        r.input("nbest", nbest_path);
        r.input("checkpoint", checkpoint);
        r.input("vocab", vocab_path);
        if (ng) r.input("ngram", ngram_path);
        const Scorer scorer = scorer_for(model, ng.get(), lambda);
        std::ofstream os(r.path("rescored.tsv"));
        if (!os) throw IoError("cannot write '" + r.path("rescored.tsv") + "'");
        for (const auto& l : lists) write_ranked(os, l.utterance, rescore_nbest(l, vocab, scorer, {lm_scale, wip}));
        os.close();
        r.output("rescored.tsv");
        r.manifest["warnings"] = warnings;
        r.manifest["utterances"] = lists.size();
        r.write_manifest();
        std::cout << r.path("rescored.tsv") << '\n';
        return kOk;
    }

    int cmd_sweep() {
        resolve();
        GeneralizationSetup setup;
        setup.source = settings.synthetic;
        setup.n_train = n_train;
        setup.n_dev = n_dev;
        setup.stage1.epochs = stage1_epochs;
        setup.stage2.epochs = stage2_epochs;
        setup.with_dropout = with_dropout;
        // Only explicitly given model flags replace the sweep's own defaults.
        const ModelConfig defaults = Settings().model;
        auto pick = [](auto given, auto dflt, auto setup_value) { return given != dflt ? given : setup_value; };
        setup.model.n_blocks = pick(settings.model.n_blocks, defaults.n_blocks, setup.model.n_blocks);
        setup.model.d_model = pick(settings.model.d_model, defaults.d_model, setup.model.d_model);
        setup.model.n_heads = pick(settings.model.n_heads, defaults.n_heads, setup.model.n_heads);
        setup.model.max_len = pick(settings.model.max_len, defaults.max_len, setup.model.max_len);
        if (settings.model.dropout_rate > 0) setup.dropout_rate = settings.model.dropout_rate;
        auto r = run("sweep");
        r.manifest["config"]["sweep"] = {{"widths", widths}, {"seeds", seeds}, {"stage1_epochs", stage1_epochs},
                                         {"stage2_epochs", stage2_epochs}, {"dropout", with_dropout}};
        std::ofstream os(r.path("sweep.tsv"));
        if (!os) throw IoError("cannot write '" + r.path("sweep.tsv") + "'");
        write_sweep_tsv(os, {}, true);
        std::size_t failures = 0;
        width_sweep<double>(setup, widths, seeds, [&](const SweepRow& row) {
            write_sweep_tsv(os, {row}, false);
            os.flush();
            write_sweep_tsv(std::cout, {row}, false);
            failures += row.variant == "error";
        });
        os.close();
        r.output("sweep.tsv");
        r.manifest["failed_runs"] = failures;
        r.write_manifest();
        return kOk;
    }

    int cmd_grad_check() {
        resolve();
        GradCheckToy toy;
        toy.seed = settings.train.seed;
        if (!settings.bayes.sites.empty()) toy.bayes.sites = settings.bayes.sites;
        toy.check.step = step;
        if (tolerance > 0) toy.check.tolerance = tolerance;
        auto r = run("grad-check");
        const auto res = run_grad_check_toy(toy);
        r.manifest["result"] = res.to_json();
        r.write_manifest();
        std::cout << res.to_json().dump() << '\n';
        return res.passed ? kOk : kNumerical;
    }

    int cmd_kl_check() {
        resolve();
        KlCheckOptions opt;
        opt.samples = kl_samples;
        opt.sites = kl_sites;
        opt.dim = kl_dim;
        opt.seed = settings.train.seed;
        if (tolerance > 0) opt.tolerance = tolerance;
        auto r = run("kl-check");
        const auto res = kl_check(opt);
        r.manifest["result"] = res.to_json();
        r.write_manifest();
        std::cout << res.to_json().dump() << '\n';
        return res.passed ? kOk : kNumerical;
    }
};

}  // namespace

int main(int argc, char** argv) {
    Cli cli;
    cli.argv.assign(argv, argv + argc);
    try {
        cli.app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return cli.app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return cli.app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return cli.app.exit(e);
    } catch (const CLI::ParseError& e) {
        cli.app.exit(e);
        return kUsage;
    } catch (const Error& e) {
        // Converters run during parsing (site lists, enum names).
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }
    try {
        return cli.action ? cli.action() : kUsage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumerical;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    }
}
