#include "forgetdissect/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>

#include "forgetdissect/error.hpp"
#include "forgetdissect/random.hpp"
#include "forgetdissect/store.hpp"
#include "forgetdissect/synthdata.hpp"

namespace forgetdissect::nets {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Identity: return "identity";
        case Activation::Tanh: return "tanh";
    }
    return "relu";
}

Activation activation_from(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "identity") return Activation::Identity;
    if (name == "tanh") return Activation::Tanh;
    fail(ErrorKind::Config, "unknown activation '" + name + "'");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void apply_activation(Activation a, Eigen::MatrixXd& m) {
    switch (a) {
        case Activation::Relu: m = m.cwiseMax(0.0); break;
        case Activation::Tanh: m = m.array().tanh().matrix(); break;
        case Activation::Identity: break;
    }
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    const double top = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - top).exp().matrix();
    return e / e.sum();
}

struct TensorRef {
    std::size_t group = 0;
    std::size_t tensor = 0;
};

struct ConvLayout {
    TensorRef weight;
    std::optional<TensorRef> bias;
    int in_h, in_w, in_c, out_c, kernel;
    Activation activation;
    bool pool;
    int out_h, out_w;
    int block_index;  // >= 0 when this layer's output is a block output
};

struct Layout {
    std::vector<ConvLayout> convs;
    std::vector<std::size_t> block_groups;
    std::size_t projection_group, classifier_group, embedding_group, recurrent_group, linear_group;
    TensorRef cls_w, cls_b, proj_w, proj_b, word, w_ih, w_hh, lstm_b, out_w, out_b;
    int feat_dim;
    int embed, hidden, vocab;
};

TensorRef find(const ModelSnapshot& m, const std::string& group, const std::string& tensor) {
    for (std::size_t g = 0; g < m.groups.size(); ++g) {
        if (m.groups[g].name != group) continue;
        for (std::size_t t = 0; t < m.groups[g].tensors.size(); ++t) {
            if (m.groups[g].tensors[t].name == tensor) return {g, t};
        }
    }
    fail(ErrorKind::Format, "model lacks tensor " + group + "/" + tensor);
}

std::size_t group_index(const ModelSnapshot& m, const std::string& name) {
    for (std::size_t g = 0; g < m.groups.size(); ++g) {
        if (m.groups[g].name == name) return g;
    }
    fail(ErrorKind::Format, "model lacks group " + name);
}

Layout make_layout(const ModelSnapshot& m) {
    const auto& cfg = m.config;
    Layout L{};
    int size = cfg.input_size;
    int channels = cfg.input_channels;
    for (int b = 0; b < cfg.num_blocks(); ++b) {
        const auto& block = cfg.blocks[static_cast<std::size_t>(b)];
        const auto gname = block_group(b + 1);
        L.block_groups.push_back(group_index(m, gname));
        for (std::size_t i = 0; i < block.layers.size(); ++i) {
            const auto& spec = block.layers[i];
            ConvLayout c{};
            c.weight = find(m, gname, "conv" + std::to_string(i + 1) + ".weight");
            if (cfg.use_bias) c.bias = find(m, gname, "conv" + std::to_string(i + 1) + ".bias");
            c.in_h = c.in_w = size;
            c.in_c = channels;
            c.out_c = spec.channels;
            c.kernel = spec.kernel;
            c.activation = spec.activation;
            c.pool = spec.pool;
            size = spec.pool ? size / 2 : size;
            c.out_h = c.out_w = size;
            c.block_index = (i + 1 == block.layers.size()) ? b : -1;
            channels = spec.channels;
            L.convs.push_back(c);
        }
    }
    L.feat_dim = channels * size * size;
    L.projection_group = group_index(m, kProjectionGroup);
    L.classifier_group = group_index(m, kClassifierGroup);
    L.embedding_group = group_index(m, "embedding");
    L.recurrent_group = group_index(m, "recurrent");
    L.linear_group = group_index(m, "linear");
    L.cls_w = find(m, kClassifierGroup, "weight");
    L.cls_b = find(m, kClassifierGroup, "bias");
    L.proj_w = find(m, kProjectionGroup, "weight");
    L.proj_b = find(m, kProjectionGroup, "bias");
    L.word = find(m, "embedding", "word.weight");
    L.w_ih = find(m, "recurrent", "w_ih");
    L.w_hh = find(m, "recurrent", "w_hh");
    L.lstm_b = find(m, "recurrent", "bias");
    L.out_w = find(m, "linear", "weight");
    L.out_b = find(m, "linear", "bias");
    L.embed = cfg.decoder.embed_dim;
    L.hidden = cfg.decoder.hidden_dim;
    L.vocab = cfg.decoder.vocab_size;
    return L;
}

const std::vector<double>& vals(const std::vector<ParamGroup>& g, TensorRef r) {
    return g[r.group].tensors[r.tensor].values;
}
std::vector<double>& vals(std::vector<ParamGroup>& g, TensorRef r) { return g[r.group].tensors[r.tensor].values; }

ConstRowMap mat(const std::vector<ParamGroup>& g, TensorRef r, int rows, int cols) {
    return ConstRowMap(vals(g, r).data(), rows, cols);
}
RowMap mat(std::vector<ParamGroup>& g, TensorRef r, int rows, int cols) {
    return RowMap(vals(g, r).data(), rows, cols);
}
ConstVecMap vec(const std::vector<ParamGroup>& g, TensorRef r) {
    const auto& v = vals(g, r);
    return ConstVecMap(v.data(), static_cast<Eigen::Index>(v.size()));
}
VecMap vec(std::vector<ParamGroup>& g, TensorRef r) {
    auto& v = vals(g, r);
    return VecMap(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd image_matrix(const Image& image) {
    Eigen::MatrixXd x(image.channels, static_cast<Eigen::Index>(image.pixels()));
    for (Eigen::Index p = 0; p < x.cols(); ++p) {
        for (int ch = 0; ch < image.channels; ++ch) {
            x(ch, p) = image.data[static_cast<std::size_t>(p) * image.channels + ch];
        }
    }
    return x;
}

/// Columns for the output pixels in `rect` of a same-padded convolution.
void im2col(const Eigen::MatrixXd& x, int height, int width, int channels, int kernel, const Rect& rect,
            Eigen::MatrixXd& cols) {
    const int pad = kernel / 2;
    cols.setZero(static_cast<Eigen::Index>(kernel) * kernel * channels, static_cast<Eigen::Index>(rect.rows()) * rect.cols());
    Eigen::Index j = 0;
    for (int r = rect.row0; r < rect.row1; ++r) {
        for (int c = rect.col0; c < rect.col1; ++c, ++j) {
            for (int ky = 0; ky < kernel; ++ky) {
                const int sr = r + ky - pad;
                if (sr < 0 || sr >= height) continue;
                for (int kx = 0; kx < kernel; ++kx) {
                    const int sc = c + kx - pad;
                    if (sc < 0 || sc >= width) continue;
                    cols.block((ky * kernel + kx) * channels, j, channels, 1) = x.col(sr * width + sc);
                }
            }
        }
    }
}

void col2im(const Eigen::MatrixXd& dcols, int height, int width, int channels, int kernel, Eigen::MatrixXd& dx) {
    const int pad = kernel / 2;
    dx.setZero(channels, static_cast<Eigen::Index>(height) * width);
    Eigen::Index j = 0;
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c, ++j) {
            for (int ky = 0; ky < kernel; ++ky) {
                const int sr = r + ky - pad;
                if (sr < 0 || sr >= height) continue;
                for (int kx = 0; kx < kernel; ++kx) {
                    const int sc = c + kx - pad;
                    if (sc < 0 || sc >= width) continue;
                    dx.col(sr * width + sc) += dcols.block((ky * kernel + kx) * channels, j, channels, 1);
                }
            }
        }
    }
}

Eigen::MatrixXd conv_act(const ConvLayout& c, const std::vector<ParamGroup>& params, const Eigen::MatrixXd& cols,
                         Eigen::MatrixXd* pre_out) {
    Eigen::MatrixXd pre = mat(params, c.weight, c.out_c, c.kernel * c.kernel * c.in_c) * cols;
    if (c.bias) pre.colwise() += vec(params, *c.bias);
    Eigen::MatrixXd act = pre;
    apply_activation(c.activation, act);
    if (pre_out) *pre_out = std::move(pre);
    return act;
}

/// 2x2 max pool; ties resolve to the first position in row-major order.
Eigen::MatrixXd max_pool(const Eigen::MatrixXd& x, int height, int width, std::vector<int>* argmax) {
    const int oh = height / 2;
    const int ow = width / 2;
    Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(oh) * ow);
    if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
    for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
            const int o = r * ow + c;
            const int cand[4] = {2 * r * width + 2 * c, 2 * r * width + 2 * c + 1, (2 * r + 1) * width + 2 * c,
                                 (2 * r + 1) * width + 2 * c + 1};
            for (Eigen::Index ch = 0; ch < x.rows(); ++ch) {
                int best = cand[0];
                for (int k = 1; k < 4; ++k) {
                    if (x(ch, cand[k]) > x(ch, best)) best = cand[k];
                }
                out(ch, o) = x(ch, best);
                if (argmax) (*argmax)[static_cast<std::size_t>(o * x.rows() + ch)] = best;
            }
        }
    }
    return out;
}

struct ConvCache {
    Eigen::MatrixXd cols, pre, act;
    std::vector<int> argmax;
};

struct EncoderPass {
    std::vector<ConvCache> convs;
    std::vector<Eigen::MatrixXd> outputs;  // outputs[0] = input image
    Eigen::VectorXd features;
};

EncoderPass encode(const Layout& L, const std::vector<ParamGroup>& params, const Image& image, bool keep_cache) {
    EncoderPass pass;
    pass.outputs.push_back(image_matrix(image));
    if (keep_cache) pass.convs.resize(L.convs.size());
    for (std::size_t i = 0; i < L.convs.size(); ++i) {
        const auto& c = L.convs[i];
        Eigen::MatrixXd cols;
        im2col(pass.outputs.back(), c.in_h, c.in_w, c.in_c, c.kernel, Rect{0, c.in_h, 0, c.in_w}, cols);
        Eigen::MatrixXd pre;
        Eigen::MatrixXd act = conv_act(c, params, cols, keep_cache ? &pre : nullptr);
        Eigen::MatrixXd out;
        if (c.pool) {
            out = max_pool(act, c.in_h, c.in_w, keep_cache ? &pass.convs[i].argmax : nullptr);
        } else {
            out = act;
        }
        if (keep_cache) {
            pass.convs[i].cols = std::move(cols);
            pass.convs[i].pre = std::move(pre);
            pass.convs[i].act = std::move(act);
        }
        pass.outputs.push_back(std::move(out));
    }
    pass.features = ConstVecMap(pass.outputs.back().data(), pass.outputs.back().size());
    return pass;
}

struct LstmStep {
    Eigen::VectorXd x, h_prev, c_prev, i, f, g, o, c, tanh_c, h;
};

void lstm_step(const Layout& L, const std::vector<ParamGroup>& params, const Eigen::VectorXd& x,
               const Eigen::VectorXd& h_prev, const Eigen::VectorXd& c_prev, LstmStep& s) {
    const int H = L.hidden;
    const Eigen::VectorXd z = mat(params, L.w_ih, 4 * H, L.embed) * x + mat(params, L.w_hh, 4 * H, H) * h_prev +
                              vec(params, L.lstm_b);
    s.x = x;
    s.h_prev = h_prev;
    s.c_prev = c_prev;
    s.i = z.segment(0, H).unaryExpr(&sigmoid);
    s.f = z.segment(H, H).unaryExpr(&sigmoid);
    s.g = z.segment(2 * H, H).array().tanh().matrix();
    s.o = z.segment(3 * H, H).unaryExpr(&sigmoid);
    s.c = s.f.cwiseProduct(c_prev) + s.i.cwiseProduct(s.g);
    s.tanh_c = s.c.array().tanh().matrix();
    s.h = s.o.cwiseProduct(s.tanh_c);
}

Eigen::VectorXd word_vector(const Layout& L, const std::vector<ParamGroup>& params, int token) {
    require(token >= 0 && token < L.vocab, ErrorKind::Input, "token id outside the decoder vocabulary");
    return mat(params, L.word, L.vocab, L.embed).row(token).transpose();
}

Eigen::VectorXd image_embedding(const Layout& L, const std::vector<ParamGroup>& params, const Eigen::VectorXd& feat) {
    return mat(params, L.proj_w, L.embed, L.feat_dim) * feat + vec(params, L.proj_b);
}

void check_image(const ModelSnapshot& m, const Image& image) {
    require(image.height == m.config.input_size && image.width == m.config.input_size &&
                image.channels == m.config.input_channels,
            ErrorKind::Input,
            "image shape " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                std::to_string(image.channels) + " does not match the model input");
}

/// Forward + optional backward. `trainable` (per group) prunes gradient work.
LossBreakdown run_loss(const ModelSnapshot& m, const Image& image, int label, const std::vector<int>& caption,
                       std::vector<ParamGroup>* grads, const std::vector<bool>* trainable) {
    check_image(m, image);
    require(!caption.empty(), ErrorKind::Input, "caption must not be empty");
    const int row = m.head_row(label);
    require(row >= 0, ErrorKind::Input, "label " + std::to_string(label) + " has no classifier row");
    const Layout L = make_layout(m);
    const auto& P = m.groups;
    auto wants = [&](std::size_t g) { return grads && (!trainable || (*trainable)[g]); };

    EncoderPass enc = encode(L, P, image, grads != nullptr);
    const int n_cls = static_cast<int>(m.head_classes.size());

    // classifier head
    const Eigen::VectorXd cls_logits = mat(P, L.cls_w, n_cls, L.feat_dim) * enc.features + vec(P, L.cls_b);
    const Eigen::VectorXd cls_prob = softmax(cls_logits);
    LossBreakdown loss;
    loss.classification = -std::log(std::max(cls_prob(row), 1e-300));

    // decoder
    const int T = static_cast<int>(caption.size());
    const int H = L.hidden;
    std::vector<LstmStep> steps(static_cast<std::size_t>(T) + 1);
    std::vector<Eigen::VectorXd> probs(static_cast<std::size_t>(T) + 1);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(H);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(H);
    const auto out_w = mat(P, L.out_w, L.vocab, H);
    const auto out_b = vec(P, L.out_b);
    double caption_loss = 0.0;
    for (int t = 0; t <= T; ++t) {
        const Eigen::VectorXd x = t == 0 ? image_embedding(L, P, enc.features)
                                         : word_vector(L, P, t == 1 ? synthdata::kBos : caption[static_cast<std::size_t>(t) - 2]);
        lstm_step(L, P, x, h, c, steps[static_cast<std::size_t>(t)]);
        h = steps[static_cast<std::size_t>(t)].h;
        c = steps[static_cast<std::size_t>(t)].c;
        if (t >= 1) {
            const int target = caption[static_cast<std::size_t>(t) - 1];
            require(target >= 0 && target < L.vocab, ErrorKind::Input, "caption token outside the vocabulary");
            probs[static_cast<std::size_t>(t)] = softmax(out_w * h + out_b);
            caption_loss += -std::log(std::max(probs[static_cast<std::size_t>(t)](target), 1e-300));
        }
    }
    loss.caption = caption_loss / T;
    loss.total = loss.caption + loss.classification;
    if (!grads) return loss;

    auto& G = *grads;
    Eigen::VectorXd dfeat = Eigen::VectorXd::Zero(L.feat_dim);

    // classifier backward
    {
        Eigen::VectorXd dlogits = cls_prob;
        dlogits(row) -= 1.0;
        if (wants(L.classifier_group)) {
            mat(G, L.cls_w, n_cls, L.feat_dim) += dlogits * enc.features.transpose();
            vec(G, L.cls_b) += dlogits;
        }
        dfeat += mat(P, L.cls_w, n_cls, L.feat_dim).transpose() * dlogits;
    }

    // decoder backward through time
    const auto w_ih = mat(P, L.w_ih, 4 * H, L.embed);
    const auto w_hh = mat(P, L.w_hh, 4 * H, H);
    Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(H);
    Eigen::VectorXd dc_next = Eigen::VectorXd::Zero(H);
    Eigen::VectorXd dz(4 * H);
    const double inv_t = 1.0 / T;
    for (int t = T; t >= 0; --t) {
        const auto& s = steps[static_cast<std::size_t>(t)];
        Eigen::VectorXd dh = dh_next;
        if (t >= 1) {
            Eigen::VectorXd dlogits = probs[static_cast<std::size_t>(t)] * inv_t;
            dlogits(caption[static_cast<std::size_t>(t) - 1]) -= inv_t;
            if (wants(L.linear_group)) {
                mat(G, L.out_w, L.vocab, H) += dlogits * s.h.transpose();
                vec(G, L.out_b) += dlogits;
            }
            dh += out_w.transpose() * dlogits;
        }
        const Eigen::VectorXd d_o = dh.cwiseProduct(s.tanh_c);
        Eigen::VectorXd dc = dc_next + dh.cwiseProduct(s.o).cwiseProduct((1.0 - s.tanh_c.array().square()).matrix());
        const Eigen::VectorXd d_i = dc.cwiseProduct(s.g);
        const Eigen::VectorXd d_g = dc.cwiseProduct(s.i);
        const Eigen::VectorXd d_f = dc.cwiseProduct(s.c_prev);
        dc_next = dc.cwiseProduct(s.f);
        dz.segment(0, H) = d_i.cwiseProduct(s.i.cwiseProduct((1.0 - s.i.array()).matrix()));
        dz.segment(H, H) = d_f.cwiseProduct(s.f.cwiseProduct((1.0 - s.f.array()).matrix()));
        dz.segment(2 * H, H) = d_g.cwiseProduct((1.0 - s.g.array().square()).matrix());
        dz.segment(3 * H, H) = d_o.cwiseProduct(s.o.cwiseProduct((1.0 - s.o.array()).matrix()));
        if (wants(L.recurrent_group)) {
            mat(G, L.w_ih, 4 * H, L.embed) += dz * s.x.transpose();
            mat(G, L.w_hh, 4 * H, H) += dz * s.h_prev.transpose();
            vec(G, L.lstm_b) += dz;
        }
        dh_next = w_hh.transpose() * dz;
        const Eigen::VectorXd dx = w_ih.transpose() * dz;
        if (t == 0) {
            if (wants(L.projection_group)) {
                mat(G, L.proj_w, L.embed, L.feat_dim) += dx * enc.features.transpose();
                vec(G, L.proj_b) += dx;
            }
            dfeat += mat(P, L.proj_w, L.embed, L.feat_dim).transpose() * dx;
        } else if (wants(L.embedding_group)) {
            const int token = t == 1 ? synthdata::kBos : caption[static_cast<std::size_t>(t) - 2];
            mat(G, L.word, L.vocab, L.embed).row(token) += dx.transpose();
        }
    }

    // encoder backward; stop below the lowest trainable conv layer
    std::ptrdiff_t lowest = -1;
    for (std::size_t i = 0; i < L.convs.size(); ++i) {
        if (wants(L.convs[i].weight.group)) {
            lowest = static_cast<std::ptrdiff_t>(i);
            break;
        }
    }
    if (lowest < 0) return loss;
    const auto& last = L.convs.back();
    Eigen::MatrixXd dout = Eigen::Map<const Eigen::MatrixXd>(dfeat.data(), last.out_c, last.out_h * last.out_w);
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(L.convs.size()) - 1; i >= lowest; --i) {
        const auto& c = L.convs[static_cast<std::size_t>(i)];
        auto& cache = enc.convs[static_cast<std::size_t>(i)];
        Eigen::MatrixXd dact;
        if (c.pool) {
            dact.setZero(c.out_c, static_cast<Eigen::Index>(c.in_h) * c.in_w);
            for (Eigen::Index o = 0; o < dout.cols(); ++o) {
                for (Eigen::Index ch = 0; ch < dout.rows(); ++ch) {
                    dact(ch, cache.argmax[static_cast<std::size_t>(o * dout.rows() + ch)]) += dout(ch, o);
                }
            }
        } else {
            dact = std::move(dout);
        }
        Eigen::MatrixXd dpre;
        switch (c.activation) {
            case Activation::Relu: dpre = dact.cwiseProduct((cache.pre.array() > 0.0).cast<double>().matrix()); break;
            case Activation::Tanh: dpre = dact.cwiseProduct((1.0 - cache.act.array().square()).matrix()); break;
            case Activation::Identity: dpre = std::move(dact); break;
        }
        if (wants(c.weight.group)) {
            mat(G, c.weight, c.out_c, c.kernel * c.kernel * c.in_c) += dpre * cache.cols.transpose();
            if (c.bias) vec(G, *c.bias) += dpre.rowwise().sum();
        }
        if (i > lowest) {
            const Eigen::MatrixXd dcols = mat(P, c.weight, c.out_c, c.kernel * c.kernel * c.in_c).transpose() * dpre;
            col2im(dcols, c.in_h, c.in_w, c.in_c, c.kernel, dout);
        }
    }
    return loss;
}

Tensor make_tensor(std::string name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return Tensor{std::move(name), std::move(shape), std::vector<double>(n, 0.0)};
}

void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (auto& v : t.values) v = to_f32(rng.normal() * stddev);
}

void fill_uniform(Tensor& t, Rng& rng, double bound) {
    for (auto& v : t.values) v = to_f32(rng.uniform(-bound, bound));
}

}  // namespace

std::vector<std::string> group_names(int num_blocks) {
    std::vector<std::string> names;
    for (int b = 1; b <= num_blocks; ++b) names.push_back(block_group(b));
    names.insert(names.end(), {kProjectionGroup, kClassifierGroup, "embedding", "recurrent", "linear"});
    return names;
}

std::string block_group(int block_id) { return "block" + std::to_string(block_id); }

bool is_encoder_group(const std::string& name) { return name.rfind("block", 0) == 0 || name == kProjectionGroup; }

bool is_decoder_group(const std::string& name) {
    return name == "embedding" || name == "recurrent" || name == "linear";
}

ModelConfig ModelConfig::desk_default(int vocab_size, int input_size) {
    ModelConfig c;
    c.input_size = input_size;
    int id = 1;
    for (int channels : {16, 16, 16, 16}) {
        c.blocks.push_back(BlockSpec{id++, {ConvLayerSpec{channels, 3, Activation::Relu, true}}});
    }
    c.decoder.vocab_size = vocab_size;
    return c;
}

void ModelConfig::validate() const {
    require(input_size >= 1 && input_channels >= 1, ErrorKind::Config, "input size and channels must be positive");
    require(blocks.size() >= 2, ErrorKind::Config, "at least 2 blocks are required");
    int size = input_size;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        require(blocks[b].block_id == static_cast<int>(b) + 1, ErrorKind::Config, "block ids must be contiguous from 1");
        require(!blocks[b].layers.empty(), ErrorKind::Config, "block " + std::to_string(b + 1) + " has no layers");
        for (const auto& layer : blocks[b].layers) {
            require(layer.channels >= 1, ErrorKind::Config, "conv channels must be positive");
            require(layer.kernel >= 1 && layer.kernel % 2 == 1, ErrorKind::Config, "conv kernel must be odd");
            if (layer.pool) size /= 2;
            require(size >= 1, ErrorKind::Config,
                    "spatial size collapses below 1x1 in block " + std::to_string(b + 1));
        }
    }
    require(decoder.embed_dim >= 1 && decoder.hidden_dim >= 1 && decoder.vocab_size >= 4 && decoder.max_length >= 1,
            ErrorKind::Config, "decoder dimensions must be positive and the vocabulary must hold the special tokens");
}

std::vector<int> ModelConfig::block_sizes() const {
    std::vector<int> out;
    int size = input_size;
    for (const auto& b : blocks) {
        for (const auto& l : b.layers) size = l.pool ? size / 2 : size;
        out.push_back(size);
    }
    return out;
}

std::vector<int> ModelConfig::block_channels() const {
    std::vector<int> out;
    for (const auto& b : blocks) out.push_back(b.layers.back().channels);
    return out;
}

json ModelConfig::to_json() const {
    json bl = json::array();
    for (const auto& b : blocks) {
        json layers = json::array();
        for (const auto& l : b.layers) {
            layers.push_back({{"channels", l.channels},
                              {"kernel", l.kernel},
                              {"activation", activation_name(l.activation)},
                              {"pool", l.pool}});
        }
        bl.push_back({{"block_id", b.block_id}, {"layers", layers}});
    }
    return {{"input_size", input_size},
            {"input_channels", input_channels},
            {"use_bias", use_bias},
            {"blocks", bl},
            {"decoder",
             {{"embed_dim", decoder.embed_dim},
              {"hidden_dim", decoder.hidden_dim},
              {"vocab_size", decoder.vocab_size},
              {"max_length", decoder.max_length}}}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    try {
        c.input_size = j.value("input_size", c.input_size);
        c.input_channels = j.value("input_channels", c.input_channels);
        c.use_bias = j.value("use_bias", c.use_bias);
        if (j.contains("blocks")) {
            for (const auto& b : j.at("blocks")) {
                BlockSpec spec;
                spec.block_id = b.at("block_id").get<int>();
                for (const auto& l : b.at("layers")) {
                    ConvLayerSpec layer;
                    layer.channels = l.at("channels").get<int>();
                    layer.kernel = l.value("kernel", 3);
                    layer.activation = activation_from(l.value("activation", std::string("relu")));
                    layer.pool = l.value("pool", true);
                    spec.layers.push_back(layer);
                }
                c.blocks.push_back(spec);
            }
        }
        if (j.contains("decoder")) {
            const auto& d = j.at("decoder");
            c.decoder.embed_dim = d.value("embed_dim", c.decoder.embed_dim);
            c.decoder.hidden_dim = d.value("hidden_dim", c.decoder.hidden_dim);
            c.decoder.vocab_size = d.value("vocab_size", c.decoder.vocab_size);
            c.decoder.max_length = d.value("max_length", c.decoder.max_length);
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid model config: ") + e.what());
    }
    return c;
}

Tensor& ParamGroup::tensor(const std::string& n) {
    for (auto& t : tensors) {
        if (t.name == n) return t;
    }
    fail(ErrorKind::Input, "group " + name + " has no tensor " + n);
}

const Tensor& ParamGroup::tensor(const std::string& n) const {
    for (const auto& t : tensors) {
        if (t.name == n) return t;
    }
    fail(ErrorKind::Input, "group " + name + " has no tensor " + n);
}

std::size_t ParamGroup::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
}

json Provenance::to_json() const { return {{"tasks", tasks}, {"seed", seed}, {"train_samples", train_samples}}; }

Provenance Provenance::from_json(const json& j) {
    Provenance p;
    p.tasks = j.at("tasks").get<std::vector<std::vector<int>>>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.train_samples = j.at("train_samples").get<std::int64_t>();
    return p;
}

ParamGroup& ModelSnapshot::group(const std::string& name) {
    for (auto& g : groups) {
        if (g.name == name) return g;
    }
    fail(ErrorKind::Config, "unknown parameter group '" + name + "'");
}

const ParamGroup& ModelSnapshot::group(const std::string& name) const {
    for (const auto& g : groups) {
        if (g.name == name) return g;
    }
    fail(ErrorKind::Config, "unknown parameter group '" + name + "'");
}

bool ModelSnapshot::has_group(const std::string& name) const {
    return std::any_of(groups.begin(), groups.end(), [&](const ParamGroup& g) { return g.name == name; });
}

int ModelSnapshot::head_row(int class_id) const {
    const auto it = std::find(head_classes.begin(), head_classes.end(), class_id);
    return it == head_classes.end() ? -1 : static_cast<int>(it - head_classes.begin());
}

std::size_t ModelSnapshot::parameter_count() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.parameter_count();
    return n;
}

ModelSnapshot build_model(const ModelConfig& config, const std::vector<int>& head_classes, std::uint64_t seed) {
    config.validate();
    require(!head_classes.empty(), ErrorKind::Config, "classifier head needs at least one class");
    ModelSnapshot m;
    m.config = config;
    m.head_classes = head_classes;
    m.provenance.seed = seed;

    int channels = config.input_channels;
    for (const auto& block : config.blocks) {
        ParamGroup g{block_group(block.block_id), {}};
        Rng rng(derive_seed(seed, 0xb10c, static_cast<std::uint64_t>(block.block_id)));
        for (std::size_t i = 0; i < block.layers.size(); ++i) {
            const auto& l = block.layers[i];
            auto w = make_tensor("conv" + std::to_string(i + 1) + ".weight", {l.channels, l.kernel, l.kernel, channels});
            fill_normal(w, rng, std::sqrt(2.0 / (l.kernel * l.kernel * channels)));
            g.tensors.push_back(std::move(w));
            if (config.use_bias) {
                g.tensors.push_back(make_tensor("conv" + std::to_string(i + 1) + ".bias", {l.channels}));
            }
            channels = l.channels;
        }
        m.groups.push_back(std::move(g));
    }
    const int feat = channels * config.block_sizes().back() * config.block_sizes().back();
    const int E = config.decoder.embed_dim;
    const int H = config.decoder.hidden_dim;
    const int V = config.decoder.vocab_size;
    const int C = static_cast<int>(head_classes.size());

    {
        Rng rng(derive_seed(seed, 0xe3bd));
        ParamGroup g{kProjectionGroup, {}};
        auto proj = make_tensor("weight", {E, feat});
        fill_normal(proj, rng, std::sqrt(1.0 / feat));
        g.tensors.push_back(std::move(proj));
        g.tensors.push_back(make_tensor("bias", {E}));
        m.groups.push_back(std::move(g));
    }
    {
        Rng rng(derive_seed(seed, 0xc1a5));
        ParamGroup g{kClassifierGroup, {}};
        auto w = make_tensor("weight", {C, feat});
        fill_normal(w, rng, std::sqrt(1.0 / feat));
        g.tensors.push_back(std::move(w));
        g.tensors.push_back(make_tensor("bias", {C}));
        m.groups.push_back(std::move(g));
    }
    {
        Rng rng(derive_seed(seed, 0xe3be));
        ParamGroup g{"embedding", {}};
        auto word = make_tensor("word.weight", {V, E});
        fill_normal(word, rng, 0.3);
        g.tensors.push_back(std::move(word));
        m.groups.push_back(std::move(g));
    }
    {
        Rng rng(derive_seed(seed, 0x1573));
        ParamGroup g{"recurrent", {}};
        const double bound = 1.0 / std::sqrt(static_cast<double>(H));
        auto w_ih = make_tensor("w_ih", {4 * H, E});
        fill_uniform(w_ih, rng, bound);
        auto w_hh = make_tensor("w_hh", {4 * H, H});
        fill_uniform(w_hh, rng, bound);
        auto b = make_tensor("bias", {4 * H});
        for (int k = H; k < 2 * H; ++k) b.values[static_cast<std::size_t>(k)] = 1.0;  // forget gate
        g.tensors.push_back(std::move(w_ih));
        g.tensors.push_back(std::move(w_hh));
        g.tensors.push_back(std::move(b));
        m.groups.push_back(std::move(g));
    }
    {
        Rng rng(derive_seed(seed, 0x11ea));
        ParamGroup g{"linear", {}};
        auto w = make_tensor("weight", {V, H});
        fill_uniform(w, rng, 1.0 / std::sqrt(static_cast<double>(H)));
        g.tensors.push_back(std::move(w));
        g.tensors.push_back(make_tensor("bias", {V}));
        m.groups.push_back(std::move(g));
    }
    return m;
}

void widen_head(ModelSnapshot& model, const std::vector<int>& classes, std::uint64_t seed) {
    auto& g = model.group(kClassifierGroup);
    auto& w = g.tensor("weight");
    auto& b = g.tensor("bias");
    const int feat = w.shape[1];
    Rng rng(derive_seed(seed, 0x91de));
    for (int c : classes) {
        if (model.head_row(c) >= 0) continue;
        model.head_classes.push_back(c);
        for (int k = 0; k < feat; ++k) w.values.push_back(to_f32(rng.normal() * std::sqrt(1.0 / feat)));
        b.values.push_back(0.0);
        w.shape[0] += 1;
        b.shape[0] += 1;
    }
}

std::vector<ParamGroup> zeros_like(const ModelSnapshot& model) {
    auto out = model.groups;
    for (auto& g : out) {
        for (auto& t : g.tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
    }
    return out;
}

Features forward_features(const ModelSnapshot& model, const Image& image) {
    check_image(model, image);
    const Layout L = make_layout(model);
    EncoderPass pass = encode(L, model.groups, image, false);
    Features f;
    for (std::size_t i = 0; i < L.convs.size(); ++i) {
        const auto& c = L.convs[i];
        if (c.block_index < 0) continue;
        f.blocks.push_back(BlockOutput{c.out_h, c.out_w, pass.outputs[i + 1]});
    }
    const int n = static_cast<int>(model.head_classes.size());
    f.logits = mat(model.groups, L.cls_w, n, L.feat_dim) * pass.features + vec(model.groups, L.cls_b);
    return f;
}

int classify(const ModelSnapshot& model, const Image& image) {
    const auto f = forward_features(model, image);
    Eigen::Index best = 0;
    f.logits.maxCoeff(&best);
    return model.head_classes[static_cast<std::size_t>(best)];
}

std::vector<int> decode_caption(const ModelSnapshot& model, const Image& image) {
    check_image(model, image);
    const Layout L = make_layout(model);
    const auto& P = model.groups;
    const EncoderPass pass = encode(L, P, image, false);
    const int H = L.hidden;
    LstmStep s;
    Eigen::VectorXd h = Eigen::VectorXd::Zero(H);
    Eigen::VectorXd c = Eigen::VectorXd::Zero(H);
    lstm_step(L, P, image_embedding(L, P, pass.features), h, c, s);
    const auto out_w = mat(P, L.out_w, L.vocab, H);
    const auto out_b = vec(P, L.out_b);
    std::vector<int> tokens;
    int token = synthdata::kBos;
    while (static_cast<int>(tokens.size()) < model.config.decoder.max_length) {
        h = s.h;
        c = s.c;
        lstm_step(L, P, word_vector(L, P, token), h, c, s);
        Eigen::Index best = 0;
        (out_w * s.h + out_b).maxCoeff(&best);
        token = static_cast<int>(best);
        tokens.push_back(token);
        if (token == synthdata::kEos) break;
    }
    return tokens;
}

double cross_entropy(std::span<const double> probabilities, int target) {
    require(target >= 0 && static_cast<std::size_t>(target) < probabilities.size(), ErrorKind::Input,
            "cross-entropy target outside the distribution");
    return -std::log(probabilities[static_cast<std::size_t>(target)]);
}

LossBreakdown compute_loss(const ModelSnapshot& model, const Image& image, int label, const std::vector<int>& caption) {
    return run_loss(model, image, label, caption, nullptr, nullptr);
}

LossBreakdown accumulate_gradients(const ModelSnapshot& model, const Image& image, int label,
                                   const std::vector<int>& caption, std::vector<ParamGroup>& gradients) {
    return run_loss(model, image, label, caption, &gradients, nullptr);
}

json TrainHyperparams::to_json() const {
    return {{"epochs", epochs}, {"learning_rate", learning_rate}, {"batch_size", batch_size}};
}

TrainHyperparams TrainHyperparams::from_json(const json& j) { return from_json(j, TrainHyperparams{}); }

TrainHyperparams TrainHyperparams::from_json(const json& j, const TrainHyperparams& defaults) {
    TrainHyperparams h = defaults;
    try {
        h.epochs = j.value("epochs", h.epochs);
        h.learning_rate = j.value("learning_rate", h.learning_rate);
        h.batch_size = j.value("batch_size", h.batch_size);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("invalid hyperparameters: ") + e.what());
    }
    require(h.epochs >= 1 && h.learning_rate > 0.0 && h.batch_size >= 1, ErrorKind::Config,
            "epochs, learning_rate and batch_size must be positive");
    return h;
}

TrainResult train_task(const ModelSnapshot& model, const synthdata::Dataset& dataset, const std::vector<int>& train_ids,
                       const std::vector<int>& task_classes, const LrMultipliers& multipliers,
                       const TrainHyperparams& hyperparams, std::uint64_t seed) {
    require(hyperparams.epochs >= 1 && hyperparams.learning_rate > 0.0 && hyperparams.batch_size >= 1,
            ErrorKind::Config, "epochs, learning_rate and batch_size must be positive");
    for (const auto& [name, value] : multipliers) {
        require(model.has_group(name), ErrorKind::Config, "freeze spec references unknown group '" + name + "'");
        require(value >= 0.0 && value <= 1.0, ErrorKind::Config, "learning-rate multiplier outside [0, 1]");
    }
    std::vector<double> mult(model.groups.size(), 1.0);
    std::vector<bool> trainable(model.groups.size(), true);
    bool any = false;
    for (std::size_t g = 0; g < model.groups.size(); ++g) {
        const auto it = multipliers.find(model.groups[g].name);
        if (it != multipliers.end()) mult[g] = it->second;
        trainable[g] = mult[g] > 0.0;
        any = any || trainable[g];
    }
    require(any, ErrorKind::Config, "every parameter group is frozen; nothing to train");
    for (int c : task_classes) {
        require(model.head_row(c) >= 0, ErrorKind::Config, "task class " + std::to_string(c) + " has no classifier row");
    }
    const auto ids = synthdata::ids_with_labels(dataset, train_ids, task_classes);
    require(!ids.empty(), ErrorKind::Config, "no training samples for the task classes");

    TrainResult result{model, {}};
    ModelSnapshot& m = result.model;
    Rng rng(derive_seed(seed, 0x7a1));
    std::vector<int> order = ids;
    auto grads = zeros_like(m);
    for (int epoch = 0; epoch < hyperparams.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyperparams.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(hyperparams.batch_size));
            for (auto& g : grads) {
                for (auto& t : g.tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
            }
            for (std::size_t k = start; k < end; ++k) {
                const auto& s = dataset.sample(order[k]);
                epoch_loss += run_loss(m, s.image, s.label, s.caption, &grads, &trainable).total;
            }
            const double scale = hyperparams.learning_rate / static_cast<double>(end - start);
            for (std::size_t g = 0; g < m.groups.size(); ++g) {
                if (!trainable[g]) continue;
                for (std::size_t t = 0; t < m.groups[g].tensors.size(); ++t) {
                    auto& p = m.groups[g].tensors[t].values;
                    const auto& d = grads[g].tensors[t].values;
                    for (std::size_t i = 0; i < p.size(); ++i) p[i] = to_f32(p[i] - scale * mult[g] * d[i]);
                }
            }
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    m.provenance.tasks.push_back(task_classes);
    m.provenance.seed = seed;
    m.provenance.train_samples = static_cast<std::int64_t>(ids.size());
    return result;
}

void save_snapshot(const ModelSnapshot& model, const std::filesystem::path& path) {
    std::string payload;
    json groups = json::array();
    for (const auto& g : model.groups) {
        json tensors = json::array();
        for (const auto& t : g.tensors) {
            std::vector<float> f(t.values.begin(), t.values.end());
            tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", payload.size()}, {"count", f.size()}});
            store::append_f32_le(payload, f);
        }
        groups.push_back({{"name", g.name}, {"tensors", tensors}});
    }
    const json header = {{"schema", "forgetdissect.snapshot"},
                         {"schema_version", kSnapshotSchemaVersion},
                         {"config", model.config.to_json()},
                         {"head_classes", model.head_classes},
                         {"provenance", model.provenance.to_json()},
                         {"groups", groups},
                         {"payload_bytes", payload.size()}};
    const std::string header_text = header.dump();
    std::string bytes(kSnapshotMagic, sizeof kSnapshotMagic);
    const auto len = static_cast<std::uint64_t>(header_text.size());
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((len >> (8 * b)) & 0xff));
    bytes += header_text;
    bytes += payload;
    store::write_file_atomic(path, bytes);
    store::write_sidecar(path);
}

ModelSnapshot load_snapshot(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorKind::Io, "missing snapshot " + path.string());
    const std::string bytes = store::read_file(path);
    require(bytes.size() >= 16 && std::memcmp(bytes.data(), kSnapshotMagic, 8) == 0, ErrorKind::Format,
            "not a model snapshot (bad magic bytes): " + path.string());
    std::uint64_t len = 0;
    for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
    require(len <= bytes.size() - 16, ErrorKind::Format, "truncated snapshot header: " + path.string());
    ModelSnapshot m;
    try {
        const json header = json::parse(bytes.substr(16, len));
        require(header.at("schema") == "forgetdissect.snapshot", ErrorKind::Format, "not a model snapshot");
        require(header.at("schema_version") == kSnapshotSchemaVersion, ErrorKind::Format,
                "snapshot schema version mismatch");
        const std::string_view payload(bytes.data() + 16 + len, bytes.size() - 16 - len);
        require(payload.size() == header.at("payload_bytes").get<std::size_t>(), ErrorKind::Format,
                "truncated snapshot payload: " + path.string());
        m.config = ModelConfig::from_json(header.at("config"));
        m.head_classes = header.at("head_classes").get<std::vector<int>>();
        m.provenance = Provenance::from_json(header.at("provenance"));
        for (const auto& g : header.at("groups")) {
            ParamGroup group{g.at("name").get<std::string>(), {}};
            for (const auto& t : g.at("tensors")) {
                const auto offset = t.at("offset").get<std::size_t>();
                const auto count = t.at("count").get<std::size_t>();
                require(offset <= payload.size() && count * 4 <= payload.size() - offset, ErrorKind::Format,
                        "snapshot tensor outside payload");
                const auto f = store::decode_f32_le(payload.substr(offset, count * 4));
                group.tensors.push_back(
                    Tensor{t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>(), {f.begin(), f.end()}});
            }
            m.groups.push_back(std::move(group));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, "corrupt snapshot header in " + path.string() + ": " + e.what());
    }
    m.config.validate();
    make_layout(m);
    return m;
}

IncrementalEncoder::IncrementalEncoder(const ModelSnapshot& model, const Image& base) {
    check_image(model, base);
    const Layout L = make_layout(model);
    for (const auto& c : L.convs) {
        Layer layer{c.in_h, c.in_w, c.in_c, c.out_h, c.out_w, c.out_c, c.kernel, c.activation, c.pool,
                    Eigen::MatrixXd(mat(model.groups, c.weight, c.out_c, c.kernel * c.kernel * c.in_c)),
                    c.bias ? Eigen::VectorXd(vec(model.groups, *c.bias)) : Eigen::VectorXd::Zero(c.out_c),
                    c.block_index};
        layers_.push_back(std::move(layer));
    }
    const int n = static_cast<int>(model.head_classes.size());
    classifier_weight_ = mat(model.groups, L.cls_w, n, L.feat_dim);
    classifier_bias_ = vec(model.groups, L.cls_b);

    EncoderPass pass = encode(L, model.groups, base, false);
    base_outputs_ = std::move(pass.outputs);
    scratch_outputs_ = base_outputs_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].block_index >= 0) base_result_.block_sums.push_back(base_outputs_[i + 1].rowwise().sum());
    }
    base_result_.logits = classifier_weight_ * pass.features + classifier_bias_;
}

void IncrementalEncoder::evaluate(const Rect& rect, std::span<const double> patch, ProbeResult& out) {
    const auto& in0 = base_outputs_[0];
    const int width0 = layers_.front().in_width;
    const int height0 = layers_.front().in_height;
    const auto channels0 = in0.rows();
    require(rect.row0 >= 0 && rect.col0 >= 0 && rect.row1 <= height0 && rect.col1 <= width0 && !rect.empty(),
            ErrorKind::Input, "probe rectangle outside the image");
    require(patch.size() == static_cast<std::size_t>(rect.rows() * rect.cols() * channels0), ErrorKind::Input,
            "probe patch size mismatch");

    std::vector<Rect> touched(layers_.size() + 1);
    touched[0] = rect;
    std::size_t k = 0;
    for (int r = rect.row0; r < rect.row1; ++r) {
        for (int c = rect.col0; c < rect.col1; ++c) {
            for (Eigen::Index ch = 0; ch < channels0; ++ch) scratch_outputs_[0](ch, r * width0 + c) = patch[k++];
        }
    }

    Rect changed = rect;
    for (std::size_t i = 0; i < layers_.size() && !changed.empty(); ++i) {
        const auto& L = layers_[i];
        const int pad = L.kernel / 2;
        const Rect conv_changed{std::max(0, changed.row0 - pad), std::min(L.in_height, changed.row1 + pad),
                                std::max(0, changed.col0 - pad), std::min(L.in_width, changed.col1 + pad)};
        Rect compute = conv_changed;
        Rect output = conv_changed;
        if (L.pool) {
            output = Rect{conv_changed.row0 / 2, std::min(L.out_height, (conv_changed.row1 + 1) / 2),
                          conv_changed.col0 / 2, std::min(L.out_width, (conv_changed.col1 + 1) / 2)};
            compute = Rect{2 * output.row0, 2 * output.row1, 2 * output.col0, 2 * output.col1};
        }
        if (output.empty()) {
            changed = output;
            break;
        }
        im2col(scratch_outputs_[i], L.in_height, L.in_width, L.in_channels, L.kernel, compute, cols_);
        Eigen::MatrixXd act = L.weight * cols_;
        act.colwise() += L.bias;
        apply_activation(L.activation, act);
        auto& dst = scratch_outputs_[i + 1];
        if (L.pool) {
            const int cw = compute.cols();
            for (int r = output.row0; r < output.row1; ++r) {
                for (int c = output.col0; c < output.col1; ++c) {
                    const int lr = 2 * (r - output.row0);
                    const int lc = 2 * (c - output.col0);
                    const int cand[4] = {lr * cw + lc, lr * cw + lc + 1, (lr + 1) * cw + lc, (lr + 1) * cw + lc + 1};
                    for (Eigen::Index ch = 0; ch < act.rows(); ++ch) {
                        double best = act(ch, cand[0]);
                        for (int q = 1; q < 4; ++q) best = std::max(best, act(ch, cand[q]));
                        dst(ch, r * L.out_width + c) = best;
                    }
                }
            }
        } else {
            Eigen::Index j = 0;
            for (int r = output.row0; r < output.row1; ++r) {
                for (int c = output.col0; c < output.col1; ++c, ++j) dst.col(r * L.out_width + c) = act.col(j);
            }
        }
        touched[i + 1] = output;
        changed = output;
    }

    out.block_sums = base_result_.block_sums;
    for (std::size_t i = 0, block = 0; i < layers_.size(); ++i) {
        if (layers_[i].block_index < 0) continue;
        const Rect& t = touched[i + 1];
        const int w = layers_[i].out_width;
        for (int r = t.row0; r < t.row1; ++r) {
            for (int c = t.col0; c < t.col1; ++c) {
                out.block_sums[block] += scratch_outputs_[i + 1].col(r * w + c) - base_outputs_[i + 1].col(r * w + c);
            }
        }
        ++block;
    }
    const Eigen::VectorXd features =
        ConstVecMap(scratch_outputs_.back().data(), scratch_outputs_.back().size());
    out.logits = classifier_weight_ * features + classifier_bias_;

    for (std::size_t i = 0; i < touched.size(); ++i) {
        const Rect& t = touched[i];
        const int w = i == 0 ? width0 : layers_[i - 1].out_width;
        for (int r = t.row0; r < t.row1; ++r) {
            for (int c = t.col0; c < t.col1; ++c) scratch_outputs_[i].col(r * w + c) = base_outputs_[i].col(r * w + c);
        }
    }
}

}  // namespace forgetdissect::nets
