#include "forgetdissect/pda.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

#include "forgetdissect/error.hpp"
#include "forgetdissect/store.hpp"

namespace forgetdissect::pda {

const char* to_string(SamplerKind kind) { return kind == SamplerKind::Marginal ? "marginal" : "conditional"; }

SamplerKind sampler_from_string(const std::string& name) {
    if (name == "marginal") return SamplerKind::Marginal;
    if (name == "conditional") return SamplerKind::Conditional;
    fail(ErrorKind::Parameter, "unknown sampler '" + name + "'");
}

std::string Target::tag() const {
    if (kind == Kind::Class) return "class" + std::to_string(class_id);
    return "block" + std::to_string(block_id) + "/map" + std::to_string(map_index);
}

json Target::to_json() const {
    if (kind == Kind::Class) return {{"kind", "class"}, {"class_id", class_id}};
    return {{"kind", "hidden"}, {"block_id", block_id}, {"map_index", map_index}};
}

void PdaParams::validate(int height, int width) const {
    require(window >= 1 && window % 2 == 1, ErrorKind::Parameter, "PDA window must be odd and positive");
    require(window <= std::min(height, width), ErrorKind::Parameter, "PDA window larger than the image");
    require(num_samples >= 1, ErrorKind::Parameter, "PDA needs at least one sample per window");
    require(threads >= 1, ErrorKind::Parameter, "PDA thread count must be positive");
}

json PdaParams::to_json() const {
    return {{"window", window}, {"sampler", to_string(sampler)}, {"num_samples", num_samples},
            {"seed", seed},     {"laplace_n", laplace_n}};
}

PdaParams PdaParams::from_json(const json& j) { return from_json(j, PdaParams{}); }

PdaParams PdaParams::from_json(const json& j, const PdaParams& defaults) {
    PdaParams p = defaults;
    try {
        p.window = j.value("window", p.window);
        if (j.contains("sampler")) p.sampler = sampler_from_string(j.at("sampler").get<std::string>());
        p.num_samples = j.value("num_samples", p.num_samples);
        p.seed = j.value("seed", p.seed);
        p.threads = j.value("threads", p.threads);
        p.laplace_n = j.value("laplace_n", p.laplace_n);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid PDA parameters: ") + e.what());
    }
    return p;
}

std::string EvidenceMask::rule_tag() const {
    if (rule == ThresholdRule::Sign) return "sign";
    char buf[48];
    std::snprintf(buf, sizeof buf, "percentile:%.6g", q);
    return buf;
}

MarginalSampler::MarginalSampler(std::vector<Image> donors) : donors_(std::move(donors)) {
    require(!donors_.empty(), ErrorKind::Parameter, "marginal sampler needs at least one donor image");
}

void MarginalSampler::sample(const Image& image, const Rect& window, Rng& rng, std::span<double> out) const {
    const auto& donor = donors_[rng.below(donors_.size())];
    require(donor.same_shape(image), ErrorKind::Input, "donor image shape differs from the analysed image");
    std::size_t k = 0;
    for (int r = window.row0; r < window.row1; ++r) {
        for (int c = window.col0; c < window.col1; ++c) {
            for (int ch = 0; ch < image.channels; ++ch) out[k++] = donor.at(r, c, ch);
        }
    }
}

namespace {

/// Offsets (dr, dc) of the patch cells, split into inner window and border.
void patch_layout(int window, int border, std::vector<std::pair<int, int>>& inner,
                  std::vector<std::pair<int, int>>& outer) {
    const int side = window + 2 * border;
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
            const bool in = r >= border && r < border + window && c >= border && c < border + window;
            (in ? inner : outer).emplace_back(r - border, c - border);
        }
    }
}

double clamped(const Image& img, int r, int c, int ch) {
    return img.at(std::clamp(r, 0, img.height - 1), std::clamp(c, 0, img.width - 1), ch);
}

}  // namespace

ConditionalSampler::ConditionalSampler(const std::vector<Image>& donors, int window, int border, int stride)
    : window_(window), border_(border) {
    require(!donors.empty(), ErrorKind::Parameter, "conditional sampler needs at least one donor image");
    require(window >= 1 && border >= 1 && stride >= 1, ErrorKind::Parameter, "invalid conditional sampler geometry");
    channels_ = donors.front().channels;
    std::vector<std::pair<int, int>> inner, outer;
    patch_layout(window, border, inner, outer);
    const auto n_in = static_cast<Eigen::Index>(inner.size()) * channels_;
    const auto n_out = static_cast<Eigen::Index>(outer.size()) * channels_;
    const Eigen::Index dim = n_in + n_out;

    Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::MatrixXd batch(dim, 256);
    Eigen::Index filled = 0;
    double count = 0;
    auto flush = [&] {
        if (filled == 0) return;
        const auto b = batch.leftCols(filled);
        sum += b.rowwise().sum();
        scatter.selfadjointView<Eigen::Lower>().rankUpdate(b);
        count += static_cast<double>(filled);
        filled = 0;
    };
    for (const auto& img : donors) {
        require(img.channels == channels_, ErrorKind::Input, "donor channel counts differ");
        for (int r0 = 0; r0 + window <= img.height; r0 += stride) {
            for (int c0 = 0; c0 + window <= img.width; c0 += stride) {
                Eigen::Index k = 0;
                for (const auto* cells : {&inner, &outer}) {
                    for (const auto& [dr, dc] : *cells) {
                        for (int ch = 0; ch < channels_; ++ch) batch(k++, filled) = clamped(img, r0 + dr, c0 + dc, ch);
                    }
                }
                if (++filled == batch.cols()) flush();
            }
        }
    }
    flush();
    require(count >= 2, ErrorKind::Parameter, "too few donor patches to fit the conditional sampler");
    const Eigen::VectorXd mean = sum / count;
    Eigen::MatrixXd cov = scatter.selfadjointView<Eigen::Lower>();
    cov = (cov - count * mean * mean.transpose()) / (count - 1.0);
    cov.diagonal().array() += 1e-4;

    mean_inner_ = mean.head(n_in);
    mean_border_ = mean.tail(n_out);
    const Eigen::MatrixXd s_ww = cov.topLeftCorner(n_in, n_in);
    const Eigen::MatrixXd s_wb = cov.topRightCorner(n_in, n_out);
    const Eigen::MatrixXd s_bb = cov.bottomRightCorner(n_out, n_out);
    const Eigen::LLT<Eigen::MatrixXd> bb(s_bb);
    require(bb.info() == Eigen::Success, ErrorKind::Parameter, "border covariance is not positive definite");
    gain_ = bb.solve(s_wb.transpose()).transpose();
    Eigen::MatrixXd cond = s_ww - gain_ * s_wb.transpose();
    cond = 0.5 * (cond + cond.transpose());
    cond.diagonal().array() += 1e-6;
    const Eigen::LLT<Eigen::MatrixXd> llt(cond);
    require(llt.info() == Eigen::Success, ErrorKind::Parameter, "conditional covariance is not positive definite");
    cond_chol_ = llt.matrixL();
}

void ConditionalSampler::sample(const Image& image, const Rect& window, Rng& rng, std::span<double> out) const {
    require(window.rows() == window_ && window.cols() == window_, ErrorKind::Parameter,
            "conditional sampler was fitted for a different window size");
    std::vector<std::pair<int, int>> inner, outer;
    patch_layout(window_, border_, inner, outer);
    Eigen::VectorXd b(static_cast<Eigen::Index>(outer.size()) * channels_);
    Eigen::Index k = 0;
    for (const auto& [dr, dc] : outer) {
        for (int ch = 0; ch < channels_; ++ch) b(k++) = clamped(image, window.row0 + dr, window.col0 + dc, ch);
    }
    Eigen::VectorXd z(mean_inner_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    const Eigen::VectorXd draw = mean_inner_ + gain_ * (b - mean_border_) + cond_chol_ * z;
    for (Eigen::Index i = 0; i < draw.size(); ++i) out[static_cast<std::size_t>(i)] = std::clamp(draw(i), 0.0, 1.0);
}

std::unique_ptr<Sampler> make_sampler(SamplerKind kind, const std::vector<Image>& donors, int window) {
    if (kind == SamplerKind::Marginal) return std::make_unique<MarginalSampler>(donors);
    return std::make_unique<ConditionalSampler>(donors, window);
}

NetworkProbe::NetworkProbe(const nets::ModelSnapshot& model, const Image& image) : encoder_(model, image) {
    const auto& b = encoder_.base();
    Eigen::Index total = 0;
    for (const auto& s : b.block_sums) total += s.size();
    base_.hidden.resize(total);
    Eigen::Index k = 0;
    for (const auto& s : b.block_sums) {
        base_.hidden.segment(k, s.size()) = s;
        k += s.size();
    }
    const double top = b.logits.maxCoeff();
    base_.class_probs = (b.logits.array() - top).exp().matrix();
    base_.class_probs /= base_.class_probs.sum();
}

std::unique_ptr<ProbeModel> NetworkProbe::clone() const { return std::make_unique<NetworkProbe>(*this); }

void NetworkProbe::evaluate(const Rect& window, std::span<const double> patch, Probe& out) {
    encoder_.evaluate(window, patch, scratch_);
    out.hidden.resize(base_.hidden.size());
    Eigen::Index k = 0;
    for (const auto& s : scratch_.block_sums) {
        out.hidden.segment(k, s.size()) = s;
        k += s.size();
    }
    const double top = scratch_.logits.maxCoeff();
    out.class_probs = (scratch_.logits.array() - top).exp().matrix();
    out.class_probs /= out.class_probs.sum();
}

FunctionProbe::FunctionProbe(Fn fn, const Image& image) : fn_(std::move(fn)), image_(image), work_(image) {
    base_ = fn_(image_);
}

std::unique_ptr<ProbeModel> FunctionProbe::clone() const { return std::make_unique<FunctionProbe>(*this); }

void FunctionProbe::evaluate(const Rect& window, std::span<const double> patch, Probe& out) {
    std::size_t k = 0;
    for (int r = window.row0; r < window.row1; ++r) {
        for (int c = window.col0; c < window.col1; ++c) {
            for (int ch = 0; ch < work_.channels; ++ch) work_.at(r, c, ch) = static_cast<float>(patch[k++]);
        }
    }
    out = fn_(work_);
    for (int r = window.row0; r < window.row1; ++r) {
        for (int c = window.col0; c < window.col1; ++c) {
            for (int ch = 0; ch < work_.channels; ++ch) work_.at(r, c, ch) = image_.at(r, c, ch);
        }
    }
}

double weight_of_evidence(double p, std::int64_t n, int num_classes) {
    const double corrected = (p * static_cast<double>(n) + 1.0) / (static_cast<double>(n) + num_classes);
    return std::log2(corrected / (1.0 - corrected));
}

RelevanceSet relevance_all(const ProbeModel& probe, const Image& image, const PdaParams& params,
                           const Sampler& sampler, std::int64_t laplace_n) {
    params.validate(image.height, image.width);
    const int k = params.window;
    const int rows = image.height - k + 1;
    const int cols = image.width - k + 1;
    const int n_windows = rows * cols;
    const Probe& base = probe.base();
    const auto n_hidden = base.hidden.size();
    const auto n_classes = base.class_probs.size();
    if (n_classes > 0) require(laplace_n > 0, ErrorKind::Parameter, "class relevance needs a positive training-set size");

    // Per-window mean change from the base; accumulating differences keeps
    // windows that leave a quantity untouched at exactly zero.
    Eigen::MatrixXd hidden_shift(n_hidden, n_windows);
    Eigen::MatrixXd class_mean(n_classes, n_windows);

    auto work = [&](int begin, int end) {
        auto local = probe.clone();
        std::vector<double> patch(static_cast<std::size_t>(k) * k * image.channels);
        Probe out;
        for (int w = begin; w < end; ++w) {
            const Rect rect{w / cols, w / cols + k, w % cols, w % cols + k};
            Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(w)));
            Eigen::VectorXd h = Eigen::VectorXd::Zero(n_hidden);
            Eigen::VectorXd p = Eigen::VectorXd::Zero(n_classes);
            for (int s = 0; s < params.num_samples; ++s) {
                sampler.sample(image, rect, rng, patch);
                local->evaluate(rect, patch, out);
                h += out.hidden - base.hidden;
                p += out.class_probs - base.class_probs;
            }
            hidden_shift.col(w) = h / params.num_samples;
            class_mean.col(w) = base.class_probs + p / params.num_samples;
        }
    };
    const int threads = std::min(params.threads, n_windows);
    if (threads <= 1) {
        work(0, n_windows);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back(work, n_windows * t / threads, n_windows * (t + 1) / threads);
        }
        for (auto& th : pool) th.join();
    }

    // Window relevance, then per-pixel averaging in fixed window order.
    const Eigen::MatrixXd hidden_rel = -hidden_shift;
    Eigen::MatrixXd class_rel(n_classes, n_windows);
    for (Eigen::Index c = 0; c < n_classes; ++c) {
        const int num = static_cast<int>(n_classes);
        const double base_we = weight_of_evidence(base.class_probs(c), laplace_n, num);
        for (int w = 0; w < n_windows; ++w) {
            class_rel(c, w) = base_we - weight_of_evidence(class_mean(c, w), laplace_n, num);
        }
    }

    ScoreGrid coverage(image.height, image.width, 1, 0.0);
    RelevanceSet out;
    out.hidden.assign(static_cast<std::size_t>(n_hidden), ScoreGrid(image.height, image.width, 1, 0.0));
    out.classes.assign(static_cast<std::size_t>(n_classes), ScoreGrid(image.height, image.width, 1, 0.0));
    for (int w = 0; w < n_windows; ++w) {
        const int r0 = w / cols;
        const int c0 = w % cols;
        for (int r = r0; r < r0 + k; ++r) {
            for (int c = c0; c < c0 + k; ++c) {
                coverage.at(r, c) += 1.0;
                for (Eigen::Index q = 0; q < n_hidden; ++q) out.hidden[static_cast<std::size_t>(q)].at(r, c) += hidden_rel(q, w);
                for (Eigen::Index q = 0; q < n_classes; ++q) out.classes[static_cast<std::size_t>(q)].at(r, c) += class_rel(q, w);
            }
        }
    }
    for (auto* maps : {&out.hidden, &out.classes}) {
        for (auto& m : *maps) {
            for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] /= coverage.data[i];
        }
    }
    return out;
}

namespace {

std::int64_t laplace_n_for(const nets::ModelSnapshot& model, const PdaParams& params) {
    if (params.laplace_n > 0) return params.laplace_n;
    return std::max<std::int64_t>(1, model.provenance.train_samples);
}

RelevanceMap wrap(const Target& target, ScoreGrid scores, const PdaParams& params) {
    return RelevanceMap{target, std::move(scores), params.window, params.sampler, params.num_samples, params.seed};
}

void check_sampler(const PdaParams& params, const Sampler& sampler) {
    require(sampler.kind() == params.sampler, ErrorKind::Parameter, "sampler does not match the requested sampler kind");
}

}  // namespace

RelevanceMap pda_relevance(const nets::ModelSnapshot& model, const Image& image, const Target& target,
                           const PdaParams& params, const Sampler& sampler) {
    params.validate(image.height, image.width);
    check_sampler(params, sampler);
    const auto channels = model.config.block_channels();
    std::size_t flat = 0;
    if (target.kind == Target::Kind::Hidden) {
        require(target.block_id >= 1 && target.block_id <= model.num_blocks(), ErrorKind::Target,
                "unknown target block " + std::to_string(target.block_id));
        require(target.map_index >= 0 && target.map_index < channels[static_cast<std::size_t>(target.block_id - 1)],
                ErrorKind::Target, "unknown target map " + target.tag());
        for (int b = 0; b < target.block_id - 1; ++b) flat += static_cast<std::size_t>(channels[static_cast<std::size_t>(b)]);
        flat += static_cast<std::size_t>(target.map_index);
    } else {
        require(model.head_row(target.class_id) >= 0, ErrorKind::Target, "unknown target class " + std::to_string(target.class_id));
    }
    NetworkProbe probe(model, image);
    auto set = relevance_all(probe, image, params, sampler, laplace_n_for(model, params));
    if (target.kind == Target::Kind::Hidden) return wrap(target, std::move(set.hidden[flat]), params);
    return wrap(target, std::move(set.classes[static_cast<std::size_t>(model.head_row(target.class_id))]), params);
}

std::vector<std::vector<RelevanceMap>> model_relevance_sweep(const nets::ModelSnapshot& model, const Image& image,
                                                             const PdaParams& params, const Sampler& sampler) {
    params.validate(image.height, image.width);
    check_sampler(params, sampler);
    NetworkProbe probe(model, image);
    auto set = relevance_all(probe, image, params, sampler, laplace_n_for(model, params));
    std::vector<std::vector<RelevanceMap>> out;
    std::size_t flat = 0;
    const auto channels = model.config.block_channels();
    for (int b = 0; b < model.num_blocks(); ++b) {
        std::vector<RelevanceMap> maps;
        for (int m = 0; m < channels[static_cast<std::size_t>(b)]; ++m) {
            maps.push_back(wrap(Target::hidden(b + 1, m), std::move(set.hidden[flat++]), params));
        }
        out.push_back(std::move(maps));
    }
    return out;
}

std::vector<RelevanceMap> block_relevance_sweep(const nets::ModelSnapshot& model, const Image& image, int block_id,
                                                const PdaParams& params, const Sampler& sampler) {
    require(block_id >= 1 && block_id <= model.num_blocks(), ErrorKind::Target,
            "unknown block " + std::to_string(block_id));
    auto all = model_relevance_sweep(model, image, params, sampler);
    return std::move(all[static_cast<std::size_t>(block_id - 1)]);
}

EvidenceMask evidence_mask(const ScoreGrid& scores, ThresholdRule rule, double q) {
    EvidenceMask out;
    out.rule = rule;
    out.mask = Mask(scores.height, scores.width, 1, 0);
    if (rule == ThresholdRule::Sign) {
        for (std::size_t i = 0; i < scores.data.size(); ++i) out.mask.data[i] = scores.data[i] > 0.0 ? 1 : 0;
        return out;
    }
    require(q > 0.0 && q <= 1.0, ErrorKind::Parameter, "percentile fraction must lie in (0, 1]");
    out.q = q;
    const auto n = scores.data.size();
    const auto keep = static_cast<std::size_t>(std::llround(q * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores.data[a] > scores.data[b]; });
    for (std::size_t i = 0; i < keep; ++i) out.mask.data[order[i]] = 1;
    return out;
}

EvidenceMask evidence_mask(const RelevanceMap& relevance, ThresholdRule rule, double q) {
    return evidence_mask(relevance.scores, rule, q);
}

void write_relevance_archive(const std::filesystem::path& dir, const std::vector<RelevanceMap>& maps,
                             const std::vector<EvidenceMask>& masks, const json& meta) {
    require(maps.size() == masks.size(), ErrorKind::Input, "relevance archive needs one mask per map");
    store::TensorArchive archive;
    archive.meta = meta;
    json targets = json::array();
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto& m = maps[i];
        const auto tag = m.target.tag();
        targets.push_back({{"target", m.target.to_json()},
                           {"window", m.window},
                           {"sampler", to_string(m.sampler)},
                           {"num_samples", m.num_samples},
                           {"seed", m.seed},
                           {"rule", masks[i].rule_tag()}});
        std::vector<float> f(m.scores.data.begin(), m.scores.data.end());
        archive.entries.push_back(store::TensorEntry::floats("scores/" + tag, {m.scores.height, m.scores.width}, std::move(f)));
        archive.entries.push_back(store::TensorEntry::bytes("evidence/" + tag, {masks[i].mask.height, masks[i].mask.width},
                                                            masks[i].mask.data));
    }
    archive.meta["targets"] = targets;
    store::write_archive(dir, archive);
}

}  // namespace forgetdissect::pda
