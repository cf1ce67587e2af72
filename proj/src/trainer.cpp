#include "dmpt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "dmpt/errors.hpp"

namespace dmpt {

// ---- configuration -----------------------------------------------------------

void ExperimentConfig::validate() const {
    backbone.validate();
    if (shots < 1) throw ConfigError("shots must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (alpha < 0.0f || beta < 0.0f) throw ConfigError("alpha and beta must be nonnegative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) {
        throw ConfigError("warmup_epochs " + std::to_string(warmup_epochs) +
                          " must lie in [0, epochs=" + std::to_string(epochs) + "]");
    }
    if (fixed_warmup_epochs < 0) throw ConfigError("fixed_warmup_epochs must be nonnegative");
    if (!(lr_text > 0.0f) || !(lr_visual > 0.0f)) throw ConfigError("learning rates must be positive");
}

ExperimentConfig ExperimentConfig::from_map(const ConfigMap& m) {
    ExperimentConfig c;
    c.variant = parse_variant(m.get("variant", "dpt"));
    c.shots = m.get_int("shots", 16);
    c.batch_size = m.get_int("batch_size", 32);
    c.seed = static_cast<std::uint64_t>(m.get_i64("seed", 0));

    c.backbone.image_size = m.get_int("image_size", 32);
    c.backbone.patch_size = m.get_int("patch_size", 8);
    c.backbone.d_visual = m.get_int("d_visual", 64);
    c.backbone.d_text = m.get_int("d_text", 64);
    c.backbone.embed_dim = m.get_int("embed_dim", 64);
    c.backbone.visual_layers = m.get_int("visual_layers", 4);
    c.backbone.text_layers = m.get_int("text_layers", 2);
    c.backbone.heads = m.get_int("heads", 4);
    c.backbone.vocab_size = m.get_int("vocab_size", 32);
    c.backbone.temperature = m.get_float("temperature", 0.01f);

    c.prompts.context_len = m.get_int("context_len", 16);
    c.prompts.prompt_len = m.get_int("prompt_len", 10);
    c.prompts.cavpt_len = m.get_int("cavpt_len", 10);
    c.prompts.cavpt_layers = m.get_int_list("cavpt_layers", {c.backbone.visual_layers});
    c.prompts.cavpt_shared = m.get_bool("cavpt_shared", true);
    c.prompts.aux_ln_on_attended = m.get_bool("aux_ln_on_attended", false);
    c.backbone.max_text_len =
        m.get_int("max_text_len", std::max(19, c.prompts.context_len + 3));

    c.alpha = m.get_float("alpha", 0.3f);
    c.beta = m.get_float("beta", 0.1f);
    c.epochs = m.get_int("epochs", c.shots == 1 ? 60 : 100);
    c.warmup_epochs = m.get_int("warmup_epochs", std::min(30, c.epochs));
    c.lr_text = m.get_float("lr_text", 2e-3f);
    c.lr_visual = m.get_float("lr_visual", 1e-3f);
    c.fixed_warmup_lr = m.get_float("fixed_warmup_lr", 1e-5f);
    c.fixed_warmup_epochs = m.get_int("fixed_warmup_epochs", 10);
    c.validate();
    return c;
}

// ---- task sampling -------------------------------------------------------------

FewShotTask sample_few_shot(const Dataset& dataset, int shots, std::uint64_t seed) {
    if (shots < 1) throw ValueError("shots must be at least 1");
    FewShotTask task;
    task.class_names = dataset.class_names;
    Rng rng(mix_seed(seed, 0x5A3E));
    for (int k = 0; k < task.class_count(); ++k) {
        const std::vector<int> pool = dataset.samples_of_class(k);
        if (static_cast<int>(pool.size()) < shots) {
            throw DataError("class '" + dataset.class_names[static_cast<std::size_t>(k)] + "' has " +
                            std::to_string(pool.size()) + " images, need " + std::to_string(shots));
        }
        std::vector<int> picked = rng.sample_without_replacement(static_cast<int>(pool.size()), shots);
        std::sort(picked.begin(), picked.end());
        std::vector<bool> in_support(pool.size(), false);
        for (int p : picked) in_support[static_cast<std::size_t>(p)] = true;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const int ds_index = pool[i];
            LabeledImage li{dataset.load_image(ds_index), k, ds_index};
            if (in_support[i]) {
                task.support.push_back(std::move(li));
            } else {
                task.query.push_back(std::move(li));
                task.query_bboxes.push_back(dataset.samples[static_cast<std::size_t>(ds_index)].bbox);
            }
        }
    }
    return task;
}

// ---- frozen per-task cache -------------------------------------------------------

TaskCache build_task_cache(const FewShotTask& task, const DualEncoderWeights& weights,
                           const Vocabulary& vocab) {
    NoGradGuard guard;  // everything here is frozen
    TaskCache cache;
    std::vector<Tensor> rows;
    for (int k = 0; k < task.class_count(); ++k) {
        rows.push_back(reshape(text_encode(template_sequence(vocab, k), Tensor(), weights),
                               {1, weights.cfg.embed_dim}));
    }
    cache.template_class_features = concat_rows(std::span<const Tensor>(rows.data(), rows.size()));

    auto encode_plain = [&](const std::vector<LabeledImage>& images, std::vector<Tensor>& feats,
                            std::vector<std::vector<float>>& scores) {
        feats.reserve(images.size());
        scores.reserve(images.size());
        for (const LabeledImage& im : images) {
            Tensor x = image_encode(im.image, InjectionPlan{}, weights).feature;
            feats.push_back(x);
            scores.push_back(
                zero_shot_logits(x, cache.template_class_features, weights.temperature).values());
        }
    };
    encode_plain(task.support, cache.support_plain_features, cache.support_scores);
    encode_plain(task.query, cache.query_plain_features, cache.query_scores);
    return cache;
}

// ---- loss machinery ----------------------------------------------------------------

const char* phase_name(Phase p) { return p == Phase::Warmup ? "warmup" : "main"; }

Phase phase_for_epoch(const ExperimentConfig& cfg, int epoch) {
    const bool knowledge_guided = cfg.variant == Variant::Vlp || cfg.variant == Variant::Dpt;
    return knowledge_guided && epoch < cfg.warmup_epochs ? Phase::Warmup : Phase::Main;
}

Tensor class_features_with_context(const PromptSet& prompts, const Vocabulary& vocab,
                                   const DualEncoderWeights& weights) {
    std::vector<int> ids(static_cast<std::size_t>(vocab.class_count()));
    std::iota(ids.begin(), ids.end(), 0);
    PromptedText text = build_text_prompts(prompts.text, vocab, ids);
    std::vector<Tensor> rows;
    rows.reserve(ids.size());
    for (const TokenSequence& seq : text.sequences) {
        rows.push_back(reshape(text_encode(seq, text.context, weights), {1, weights.cfg.embed_dim}));
    }
    return concat_rows(std::span<const Tensor>(rows.data(), rows.size()));
}

Tensor combine_main_loss(const Tensor& l_ce, const Tensor& l_ca, float alpha) {
    if (!l_ca.defined()) return l_ce;
    return add(scale(l_ca, alpha), l_ce);
}

Tensor combine_warmup_loss(const Tensor& l_coop, const Tensor& l_vpt, const Tensor& l_ce,
                           const Tensor& l_ca, float alpha, float beta) {
    Tensor total = add(add(l_coop, l_vpt), scale(l_ce, beta));
    if (l_ca.defined()) total = add(total, scale(l_ca, alpha));
    return total;
}

LossReport LossBundle::report() const {
    LossReport r;
    if (l_ce.defined()) r.l_ce = l_ce.item();
    if (l_ca.defined()) r.l_ca = l_ca.item();
    if (l_coop.defined()) r.l_coop = l_coop.item();
    if (l_vpt.defined()) r.l_vpt = l_vpt.item();
    if (total.defined()) r.total = total.item();
    return r;
}

namespace {

Tensor mean_of(const std::vector<Tensor>& terms) {
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return terms.size() == 1 ? acc : scale(acc, 1.0f / static_cast<float>(terms.size()));
}

Tensor ce_against_label(const Tensor& logits, int label, int classes) {
    return cross_entropy(reshape(logits, {1, classes}), {label});
}

}  // namespace

// ---- trainer -------------------------------------------------------------------------

Trainer::Trainer(const ExperimentConfig& cfg, const DualEncoderWeights& weights, PromptSet& prompts,
                 const FewShotTask& task, const Vocabulary& vocab)
    : cfg_(cfg),
      weights_(weights),
      prompts_(prompts),
      task_(task),
      vocab_(vocab),
      cache_(build_task_cache(task, weights, vocab)),
      shuffle_rng_(mix_seed(cfg.seed, 0xE60C)) {
    if (cfg_.variant == Variant::ZeroShot) {
        throw ConfigError("the zeroshot variant has no learnable parameters to train");
    }
    if (task_.support.empty()) throw DataError("task has no support images");
    text_params_ = prompts_.text_params();
    visual_params_ = prompts_.visual_params();

    steps_per_epoch_ = static_cast<int>((task_.support.size() + cfg_.batch_size - 1) / cfg_.batch_size);
    const std::int64_t total_steps = static_cast<std::int64_t>(cfg_.epochs) * steps_per_epoch_;
    text_state_ = OptimizerState{.learning_rate = 0.0f,
                                 .step_index = 0,
                                 .total_steps = total_steps,
                                 .base_lr = cfg_.lr_text,
                                 .warmup_steps = 0,
                                 .warmup_lr = 0.0f};
    // the fixed-rate window applies to the visual-side group only
    visual_state_ = OptimizerState{.learning_rate = 0.0f,
                                   .step_index = 0,
                                   .total_steps = total_steps,
                                   .base_lr = cfg_.lr_visual,
                                   .warmup_steps =
                                       static_cast<std::int64_t>(cfg_.fixed_warmup_epochs) * steps_per_epoch_,
                                   .warmup_lr = cfg_.fixed_warmup_lr};
}

LossBundle Trainer::forward_losses(const std::vector<int>& support_indices, Phase phase) {
    if (support_indices.empty()) throw DataError("empty batch");
    const int classes = task_.class_count();
    const float tau = weights_.temperature;

    Tensor class_feats = prompts_.has_text()
                             ? class_features_with_context(prompts_, vocab_, weights_)
                             : cache_.template_class_features;
    const Tensor& template_feats = cache_.template_class_features;

    const bool wants_warmup_terms = phase == Phase::Warmup;
    std::vector<Tensor> ce_terms, ca_terms, coop_terms, vpt_terms;

    for (int idx : support_indices) {
        const LabeledImage& im = task_.support.at(static_cast<std::size_t>(idx));
        const int label = im.label;
        const Tensor& x_plain = cache_.support_plain_features.at(static_cast<std::size_t>(idx));

        if (cfg_.variant == Variant::CoOp) {
            ce_terms.push_back(
                ce_against_label(zero_shot_logits(x_plain, class_feats, tau), label, classes));
            continue;
        }

        // visual-prompted pass (vpt / vlp / dpt)
        std::vector<std::pair<int, CavptOutputs>> cavpt_records;
        CavptProvider provider;
        ClassSelection selection;
        Tensor g_sel;
        if (prompts_.has_generator()) {
            selection = select_from_scores(cache_.support_scores.at(static_cast<std::size_t>(idx)),
                                           cfg_.prompts.cavpt_len, label);
            std::vector<Tensor> sel_rows;
            sel_rows.reserve(static_cast<std::size_t>(selection.size()));
            for (int ci : selection.indices) sel_rows.push_back(slice_rows(class_feats, ci, 1));
            g_sel = concat_rows(std::span<const Tensor>(sel_rows.data(), sel_rows.size()));
            provider = [this, &selection, &g_sel, &cavpt_records](int layer, const Tensor& inputs) {
                CavptOutputs outs =
                    generate_cavpt(selection, g_sel, inputs, prompts_.generator_for_layer(layer));
                cavpt_records.emplace_back(layer, outs);
                return outs.prompts;
            };
        }
        InjectionPlan plan = assemble_image_input(prompts_.visual, provider, cfg_.backbone.visual_layers);
        Tensor feat = image_encode(im.image, plan, weights_).feature;

        const Tensor& classifier = cfg_.variant == Variant::Vpt ? template_feats : class_feats;
        ce_terms.push_back(ce_against_label(zero_shot_logits(feat, classifier, tau), label, classes));

        if (!cavpt_records.empty()) {
            std::vector<Tensor> per_layer;
            per_layer.reserve(cavpt_records.size());
            for (const auto& [layer, outs] : cavpt_records) {
                Tensor logits = cavpt_aux_logits(outs, selection, label,
                                                 prompts_.generator_for_layer(layer),
                                                 cfg_.prompts.aux_ln_on_attended);
                per_layer.push_back(ce_against_label(logits, label, classes));
            }
            ca_terms.push_back(mean_of(per_layer));
        }

        if (wants_warmup_terms) {
            // distillation targets: the learned classifier on the frozen
            // feature, and the frozen classifier on the prompted feature
            coop_terms.push_back(
                ce_against_label(zero_shot_logits(x_plain, class_feats, tau), label, classes));
            vpt_terms.push_back(
                ce_against_label(zero_shot_logits(feat, template_feats, tau), label, classes));
        }
    }

    LossBundle bundle;
    bundle.l_ce = mean_of(ce_terms);
    if (!ca_terms.empty()) bundle.l_ca = mean_of(ca_terms);
    if (phase == Phase::Warmup) {
        if (coop_terms.empty()) {
            throw ContractError("warmup loss is only defined for the vlp and dpt variants");
        }
        bundle.l_coop = mean_of(coop_terms);
        bundle.l_vpt = mean_of(vpt_terms);
        bundle.total =
            combine_warmup_loss(bundle.l_coop, bundle.l_vpt, bundle.l_ce, bundle.l_ca, cfg_.alpha, cfg_.beta);
    } else {
        bundle.total = combine_main_loss(bundle.l_ce, bundle.l_ca, cfg_.alpha);
    }
    return bundle;
}

Tensor Trainer::loss_main(const std::vector<int>& support_indices) {
    return forward_losses(support_indices, Phase::Main).l_ce;
}

Tensor Trainer::loss_ca(const std::vector<int>& support_indices) {
    if (cfg_.variant != Variant::Dpt || !prompts_.has_generator()) {
        throw ContractError("the auxiliary class-aware loss exists only for the dpt variant");
    }
    return forward_losses(support_indices, Phase::Main).l_ca;
}

Tensor Trainer::warmup_loss(const std::vector<int>& support_indices) {
    return forward_losses(support_indices, Phase::Warmup).total;
}

LossReport Trainer::train_step(const std::vector<int>& support_indices) {
    const Phase phase = phase_for_epoch(cfg_, epoch_);
    LossBundle bundle = forward_losses(support_indices, phase);
    const float total = bundle.total.item();
    if (!std::isfinite(total)) {
        throw DivergenceError("training loss is not finite", step_);
    }
    backward(bundle.total);
    if (!text_params_.empty()) {
        text_state_.learning_rate = cosine_lr(text_state_);
        sgd_step(text_params_, text_state_);
    }
    if (!visual_params_.empty()) {
        visual_state_.learning_rate = cosine_lr(visual_state_);
        sgd_step(visual_params_, visual_state_);
    }
    ++step_;
    return bundle.report();
}

void Trainer::run(std::ostream* log, const std::function<bool(int)>& stop_early) {
    std::vector<int> order(task_.support.size());
    std::iota(order.begin(), order.end(), 0);
    epochs_run_ = 0;
    for (epoch_ = 0; epoch_ < cfg_.epochs; ++epoch_) {
        shuffle_rng_.shuffle(order);
        for (int start = 0; start < static_cast<int>(order.size()); start += cfg_.batch_size) {
            const int end = std::min<int>(start + cfg_.batch_size, static_cast<int>(order.size()));
            std::vector<int> batch(order.begin() + start, order.begin() + end);
            const Phase phase = phase_for_epoch(cfg_, epoch_);
            LossReport report = train_step(batch);
            if (log) {
                const float lr =
                    !text_params_.empty() ? text_state_.learning_rate : visual_state_.learning_rate;
                char line[256];
                std::snprintf(line, sizeof(line), "%d\t%lld\t%s\t%.8g\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n",
                              epoch_, static_cast<long long>(step_ - 1), phase_name(phase),
                              static_cast<double>(lr), static_cast<double>(report.l_ce),
                              static_cast<double>(report.l_ca), static_cast<double>(report.l_coop),
                              static_cast<double>(report.l_vpt), static_cast<double>(report.total));
                *log << line;
            }
        }
        epochs_run_ = epoch_ + 1;
        if (stop_early && stop_early(epoch_)) break;
    }
}

}  // namespace dmpt
