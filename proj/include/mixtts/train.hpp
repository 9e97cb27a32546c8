#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mixtts/audio.hpp"
#include "mixtts/checkpoint.hpp"
#include "mixtts/config.hpp"
#include "mixtts/model.hpp"
#include "mixtts/optim.hpp"
#include "mixtts/text.hpp"

// Training loop: seeded shuffled batching, gradient accumulation over micro
// batches, global-norm clipping, LAMB with Noam annealing, per-step metrics
// CSV and periodic checkpoints. All randomness is a pure function of
// (seed, step), so resuming from a checkpoint reproduces the run exactly.

namespace mixtts {

template <typename T>
struct Dataset {
    std::vector<TrainSample<T>> samples;
    PitchStats<T> pitch_stats;
};

// Dataset statistics over voiced frames only.
template <typename T>
PitchStats<T> compute_pitch_stats(const std::vector<TrainSample<T>>& samples) {
    double sum = 0.0, sq = 0.0;
    Index count = 0;
    for (const auto& s : samples)
        for (T f : s.pitch_hz)
            if (f > T(0)) {
                sum += static_cast<double>(f);
                sq += static_cast<double>(f) * static_cast<double>(f);
                ++count;
            }
    PitchStats<T> stats;
    if (count > 0) {
        const double mean = sum / static_cast<double>(count);
        const double var = std::max(sq / static_cast<double>(count) - mean * mean, 1e-12);
        stats.mean = static_cast<T>(mean);
        stats.stddev = static_cast<T>(std::sqrt(var));
    }
    return stats;
}

// Feature extraction for every manifest utterance: wav -> mel, pitch from the
// bundled estimator unless a pitch file is given, character tokenization
// unless a phoneme id file is given, LM tokenization for extended models.
template <typename T>
Dataset<T> prepare_dataset(const Config& cfg, const std::string& manifest_path,
                           const FrozenEmbeddingTable<T>* lm_table = nullptr) {
    const auto utterances = load_manifest(manifest_path);
    if (utterances.empty()) throw DataError("manifest holds no utterances: " + manifest_path);
    SymbolVocab vocab;
    Dataset<T> ds;
    for (const auto& u : utterances) {
        TrainSample<T> sample;
        const auto samples = read_wav<T>(u.audio_path, cfg.audio.sample_rate);
        sample.mel = mel_spectrogram(samples, cfg.audio);
        if (!u.pitch_path.empty()) {
            sample.pitch_hz = load_pitch_file<T>(u.pitch_path);
            if (static_cast<Index>(sample.pitch_hz.size()) != sample.mel.dim(0))
                throw DataError("pitch file " + u.pitch_path + " has " +
                                std::to_string(sample.pitch_hz.size()) + " frames, mel has " +
                                std::to_string(sample.mel.dim(0)));
        } else {
            sample.pitch_hz = estimate_f0(samples, cfg.audio).frame_f0;
        }
        if (!u.phoneme_path.empty())
            sample.symbol_ids = load_phoneme_file(u.phoneme_path, cfg.model.vocab_size);
        else
            sample.symbol_ids = vocab.tokenize(u.transcript).ids;
        if (cfg.model.extended) {
            if (!lm_table) throw ConfigError("extended model needs an LM table for dataset prep");
            sample.lm_ids = lm_tokenize(u.transcript, *lm_table).ids;
        }
        if (static_cast<Index>(sample.symbol_ids.size()) > sample.mel.dim(0))
            throw AlignmentError("utterance " + u.id + ": " + std::to_string(sample.symbol_ids.size()) +
                                 " symbols but only " + std::to_string(sample.mel.dim(0)) +
                                 " mel frames");
        ds.samples.push_back(std::move(sample));
    }
    ds.pitch_stats = compute_pitch_stats(ds.samples);
    return ds;
}

struct StepInfo {
    Index step = 0;  // 1-based after the update
    double lr = 0;
    double loss = 0;
    double l_mel = 0;
    double l_aligner = 0;
    double l_durs = 0;
    double l_pitch = 0;
    const std::vector<std::vector<Index>>* durations = nullptr;  // per sample of the last micro batch
};

using StepObserver = std::function<void(const StepInfo&)>;

// Deterministic sample order: micro batch k of an epoch-sized permutation
// drawn from mix(seed, epoch).
inline std::vector<std::size_t> micro_batch_indices(std::uint64_t seed, std::size_t dataset_size,
                                                    Index batch_size, Index micro_index) {
    const Index micros_per_epoch =
        std::max<Index>(1, (static_cast<Index>(dataset_size) + batch_size - 1) / batch_size);
    const Index epoch = micro_index / micros_per_epoch;
    const Index slot = micro_index % micros_per_epoch;
    std::vector<std::size_t> perm(dataset_size);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(Rng::mix(seed, 0xE70C4ULL, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = dataset_size; i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(i) - 1))]);
    std::vector<std::size_t> out;
    const std::size_t begin = static_cast<std::size_t>(slot * batch_size);
    for (std::size_t i = begin; i < std::min(begin + static_cast<std::size_t>(batch_size), dataset_size); ++i)
        out.push_back(perm[i]);
    return out;
}

template <typename T>
class Trainer {
  public:
    Trainer(const Config& cfg, const FrozenEmbeddingTable<T>* lm_table = nullptr)
        : cfg_(cfg), init_rng_(cfg.train.seed), model_(cfg, init_rng_, lm_table) {
        params_ = model_.parameters();
        opt_state_.init_like(params_);
        lamb_cfg_.beta1 = static_cast<T>(cfg.train.beta1);
        lamb_cfg_.beta2 = static_cast<T>(cfg.train.beta2);
        lamb_cfg_.eps = static_cast<T>(cfg.train.eps);
        lamb_cfg_.weight_decay = static_cast<T>(cfg.train.weight_decay);
    }

    explicit Trainer(RestoredTraining<T>&& restored)
        : cfg_(restored.cfg),
          init_rng_(0),
          model_(std::move(restored.model)),
          opt_state_(std::move(restored.opt_state)),
          step_(static_cast<Index>(restored.step)) {
        params_ = model_.parameters();
        lamb_cfg_.beta1 = static_cast<T>(cfg_.train.beta1);
        lamb_cfg_.beta2 = static_cast<T>(cfg_.train.beta2);
        lamb_cfg_.eps = static_cast<T>(cfg_.train.eps);
        lamb_cfg_.weight_decay = static_cast<T>(cfg_.train.weight_decay);
    }

    MixerTtsModel<T>& model() { return model_; }
    const Config& config() const { return cfg_; }
    Index step() const { return step_; }
    LambState<T>& optimizer_state() { return opt_state_; }

    void set_dataset(Dataset<T> ds) {
        if (ds.samples.empty()) throw DataError("training dataset is empty");
        dataset_ = std::move(ds);
        model_.set_pitch_stats(dataset_.pitch_stats);
    }

    const Dataset<T>& dataset() const { return dataset_; }

    // One optimizer step (accum micro batches), returns the averaged losses.
    StepInfo run_step() {
        if (dataset_.samples.empty()) throw DataError("training dataset is empty");
        zero_grads(params_);
        StepInfo info;
        last_durations_.clear();
        for (Index a = 0; a < cfg_.train.accum; ++a) {
            const Index micro_index = step_ * cfg_.train.accum + a;
            const auto idx =
                micro_batch_indices(cfg_.train.seed, dataset_.samples.size(), cfg_.train.batch_size,
                                    micro_index);
            std::vector<TrainSample<T>> batch;
            for (std::size_t i : idx) batch.push_back(dataset_.samples[i]);
            Rng fw(Rng::mix(cfg_.train.seed, static_cast<std::uint64_t>(step_),
                            static_cast<std::uint64_t>(a)));
            Tape<T> tape;
            auto out = model_.forward_train(&tape, batch, Mode::train, fw);
            auto loss = model_.total_loss(&tape, out, batch);
            tape.backward(loss.total);
            info.loss += static_cast<double>(loss.total.item());
            info.l_mel += static_cast<double>(loss.mel.item());
            info.l_aligner += static_cast<double>(loss.aligner.item());
            info.l_durs += static_cast<double>(loss.durs.item());
            info.l_pitch += static_cast<double>(loss.pitch.item());
            last_durations_ = out.used_durations;
        }
        const double inv = 1.0 / static_cast<double>(cfg_.train.accum);
        info.loss *= inv;
        info.l_mel *= inv;
        info.l_aligner *= inv;
        info.l_durs *= inv;
        info.l_pitch *= inv;
        for (auto& [name, p] : params_)
            if (p.has_grad())
                for (T& g : p.grad()) g = static_cast<T>(g * inv);
        clip_gradients(params_, cfg_.train.clip_norm);
        const double lr = noam_lr(step_ + 1, cfg_.train.base_lr, cfg_.train.warmup);
        lamb_step(params_, opt_state_, lr, lamb_cfg_);
        step_ += 1;
        info.step = step_;
        info.lr = lr;
        info.durations = &last_durations_;
        if (!std::isfinite(info.loss))
            throw NumericalError("training loss became non-finite at step " + std::to_string(step_));
        return info;
    }

    void save(const std::string& path) const {
        save_checkpoint(path, model_, opt_state_, static_cast<std::uint64_t>(step_), cfg_.train.seed);
    }

    // Full loop with metrics CSV and periodic checkpoints under out_dir.
    void run(const std::string& out_dir, Index total_steps, StepObserver observer = nullptr) {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
        std::ofstream metrics(metrics_path, step_ == 0 ? std::ios::trunc : std::ios::app);
        if (!metrics) throw DataError("cannot write metrics: " + metrics_path);
        if (step_ == 0) metrics << "step,lr,loss,l_mel,l_aligner,l_durs,l_pitch\n";
        char row[256];
        while (step_ < total_steps) {
            const StepInfo info = run_step();
            std::snprintf(row, sizeof row, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                          static_cast<long long>(info.step), info.lr, info.loss, info.l_mel,
                          info.l_aligner, info.l_durs, info.l_pitch);
            metrics << row;
            if (observer) observer(info);
            if (cfg_.train.checkpoint_interval > 0 && info.step % cfg_.train.checkpoint_interval == 0)
                save((fs::path(out_dir) / ("checkpoint_" + std::to_string(info.step) + ".mtck")).string());
        }
        metrics.flush();
        save((fs::path(out_dir) / "checkpoint_last.mtck").string());
    }

  private:
    Config cfg_;
    Rng init_rng_;
    MixerTtsModel<T> model_;
    ParamMap<T> params_;
    LambState<T> opt_state_;
    LambConfig<T> lamb_cfg_;
    Index step_ = 0;
    Dataset<T> dataset_;
    std::vector<std::vector<Index>> last_durations_;
};

}  // namespace mixtts
