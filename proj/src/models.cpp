#include "ticketlab/models.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "ticketlab/earlybird.hpp"

namespace tl::models {

std::string family_name(Family f) {
    switch (f) {
        case Family::linear_ae: return "linear_ae";
        case Family::conv_ae: return "conv_ae";
        case Family::vae: return "vae";
        case Family::beta_vae: return "beta_vae";
        case Family::resnet_vae: return "resnet_vae";
        case Family::dcgan: return "dcgan";
        case Family::sngan: return "sngan";
        case Family::wgan: return "wgan";
        case Family::resnet_gan: return "resnet_gan";
    }
    return "?";
}

Family family_from_name(const std::string& s) {
    for (Family f : {Family::linear_ae, Family::conv_ae, Family::vae, Family::beta_vae,
                     Family::resnet_vae, Family::dcgan, Family::sngan, Family::wgan,
                     Family::resnet_gan})
        if (family_name(f) == s) return f;
    throw ContractError("unknown model family: " + s);
}

bool is_gan(Family f) {
    return f == Family::dcgan || f == Family::sngan || f == Family::wgan ||
           f == Family::resnet_gan;
}
bool is_vae(Family f) {
    return f == Family::vae || f == Family::beta_vae || f == Family::resnet_vae;
}
bool is_ae(Family f) { return f == Family::linear_ae || f == Family::conv_ae; }

ModelConfig default_config(Family f) {
    ModelConfig c;
    c.family = f;
    if (f == Family::beta_vae) c.beta = 4.0;
    if (f == Family::wgan) {
        c.wgan_clip = 0.01;
        c.critic_steps = 5;
    }
    return c;
}

namespace {

double family_lr(const ModelConfig& c) {
    if (c.lr > 0.0) return c.lr;
    return is_gan(c.family) ? 1e-3 : 2e-3;
}
double family_beta1(const ModelConfig& c) {
    if (c.adam_beta1 > 0.0) return c.adam_beta1;
    return is_gan(c.family) ? 0.5 : 0.9;
}

}  // namespace

// ---- layer implementations ----

TensorPtr Linear::forward(Tape& tape, const TensorPtr& x, bool) {
    TensorPtr w = W.tensor;
    if (spectral) w = spectral_normalize(tape, w, sn, 1);
    auto y = matmul(tape, x, transpose2d(tape, w));
    return add_row_bias(tape, y, b.tensor);
}
void Linear::collect(std::vector<Parameter*>& out) {
    out.push_back(&W);
    out.push_back(&b);
}
std::unique_ptr<Layer> Linear::clone() const {
    auto l = std::make_unique<Linear>();
    l->name = name;
    l->W.name = W.name;
    l->W.kind = W.kind;
    l->W.tensor = Tensor::from_data(W.tensor->shape, W.tensor->data, true);
    l->b.name = b.name;
    l->b.kind = b.kind;
    l->b.tensor = Tensor::from_data(b.tensor->shape, b.tensor->data, true);
    l->spectral = spectral;
    l->sn = sn;
    return l;
}

TensorPtr Conv2d::forward(Tape& tape, const TensorPtr& x, bool) {
    TensorPtr w = W.tensor;
    if (spectral) w = spectral_normalize(tape, w, sn, 1);
    return conv2d(tape, x, w, b.tensor, stride, pad);
}
void Conv2d::collect(std::vector<Parameter*>& out) {
    out.push_back(&W);
    out.push_back(&b);
}
std::unique_ptr<Layer> Conv2d::clone() const {
    auto l = std::make_unique<Conv2d>();
    l->name = name;
    l->W = {Tensor::from_data(W.tensor->shape, W.tensor->data, true), W.name, W.kind};
    l->b = {Tensor::from_data(b.tensor->shape, b.tensor->data, true), b.name, b.kind};
    l->stride = stride;
    l->pad = pad;
    l->spectral = spectral;
    l->sn = sn;
    return l;
}

TensorPtr ConvT2d::forward(Tape& tape, const TensorPtr& x, bool) {
    return conv_transpose2d(tape, x, W.tensor, b.tensor, stride, pad);
}
void ConvT2d::collect(std::vector<Parameter*>& out) {
    out.push_back(&W);
    out.push_back(&b);
}
std::unique_ptr<Layer> ConvT2d::clone() const {
    auto l = std::make_unique<ConvT2d>();
    l->name = name;
    l->W = {Tensor::from_data(W.tensor->shape, W.tensor->data, true), W.name, W.kind};
    l->b = {Tensor::from_data(b.tensor->shape, b.tensor->data, true), b.name, b.kind};
    l->stride = stride;
    l->pad = pad;
    return l;
}

TensorPtr BatchNorm2d::forward(Tape& tape, const TensorPtr& x, bool training) {
    return batchnorm2d(tape, x, gamma.tensor, beta.tensor, &running_mean, &running_var,
                       training, momentum, eps);
}
void BatchNorm2d::collect(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}
std::unique_ptr<Layer> BatchNorm2d::clone() const {
    auto l = std::make_unique<BatchNorm2d>();
    l->name = name;
    l->gamma = {Tensor::from_data(gamma.tensor->shape, gamma.tensor->data, true), gamma.name,
                gamma.kind};
    l->beta = {Tensor::from_data(beta.tensor->shape, beta.tensor->data, true), beta.name,
               beta.kind};
    l->running_mean = running_mean;
    l->running_var = running_var;
    l->momentum = momentum;
    l->eps = eps;
    return l;
}

TensorPtr Act::forward(Tape& tape, const TensorPtr& x, bool) {
    switch (kind) {
        case relu: return tl::relu(tape, x);
        case lrelu: return tl::leaky_relu(tape, x, slope);
        case tanh: return tl::tanh_op(tape, x);
        case sigmoid: return tl::sigmoid(tape, x);
    }
    throw ContractError("Act: unknown kind");
}
std::unique_ptr<Layer> Act::clone() const {
    auto l = std::make_unique<Act>();
    l->name = name;
    l->kind = kind;
    l->slope = slope;
    return l;
}

TensorPtr ReshapeTo4d::forward(Tape& tape, const TensorPtr& x, bool) {
    if (x->shape.size() != 2 || x->shape[1] % (h * w) != 0)
        throw DimError("ReshapeTo4d: cannot reshape " + shape_str(x->shape));
    return reshape(tape, x, {x->shape[0], x->shape[1] / (h * w), h, w});
}
std::unique_ptr<Layer> ReshapeTo4d::clone() const {
    auto l = std::make_unique<ReshapeTo4d>();
    l->name = name;
    l->h = h;
    l->w = w;
    return l;
}

TensorPtr Flatten::forward(Tape& tape, const TensorPtr& x, bool) {
    return reshape(tape, x, {x->shape[0], static_cast<int>(x->size() / x->shape[0])});
}
std::unique_ptr<Layer> Flatten::clone() const {
    auto l = std::make_unique<Flatten>();
    l->name = name;
    return l;
}

TensorPtr ResBlock::forward(Tape& tape, const TensorPtr& x, bool training) {
    auto h1 = c1->forward(tape, x, training);
    h1 = n1->forward(tape, h1, training);
    h1 = act == Act::relu ? tl::relu(tape, h1) : tl::leaky_relu(tape, h1, 0.2);
    auto h2 = c2->forward(tape, h1, training);
    h2 = n2->forward(tape, h2, training);
    auto sum = add(tape, x, h2);
    return act == Act::relu ? tl::relu(tape, sum) : tl::leaky_relu(tape, sum, 0.2);
}
void ResBlock::collect(std::vector<Parameter*>& out) {
    c1->collect(out);
    n1->collect(out);
    c2->collect(out);
    n2->collect(out);
}
std::unique_ptr<Layer> ResBlock::clone() const {
    auto l = std::make_unique<ResBlock>();
    l->name = name;
    l->c1.reset(static_cast<Conv2d*>(c1->clone().release()));
    l->c2.reset(static_cast<Conv2d*>(c2->clone().release()));
    l->n1.reset(static_cast<BatchNorm2d*>(n1->clone().release()));
    l->n2.reset(static_cast<BatchNorm2d*>(n2->clone().release()));
    l->act = act;
    return l;
}

// ---- builder ----

namespace {

struct Builder {
    Rng rng;
    explicit Builder(std::uint64_t seed) : rng(seed) {}

    TensorPtr gaussian(Shape shape, double stddev) {
        auto t = Tensor::create(std::move(shape), true);
        for (double& v : t->data) v = rng.normal(0.0, stddev);
        return t;
    }

    std::unique_ptr<Linear> linear(const std::string& name, int in, int out,
                                   bool spectral = false) {
        auto l = std::make_unique<Linear>();
        l->name = name;
        l->W = {gaussian({out, in}, 0.02), name + ".weight", ParamKind::linear_weight};
        l->b = {Tensor::create({out}, true), name + ".bias", ParamKind::bias};
        l->spectral = spectral;
        return l;
    }
    std::unique_ptr<Conv2d> conv(const std::string& name, int in, int out, int k, int s, int p,
                                 bool spectral = false) {
        auto l = std::make_unique<Conv2d>();
        l->name = name;
        l->W = {gaussian({out, in, k, k}, 0.02), name + ".weight", ParamKind::conv_kernel};
        l->b = {Tensor::create({out}, true), name + ".bias", ParamKind::bias};
        l->stride = s;
        l->pad = p;
        l->spectral = spectral;
        return l;
    }
    std::unique_ptr<ConvT2d> convt(const std::string& name, int in, int out, int k, int s,
                                   int p) {
        auto l = std::make_unique<ConvT2d>();
        l->name = name;
        l->W = {gaussian({in, out, k, k}, 0.02), name + ".weight", ParamKind::conv_kernel};
        l->b = {Tensor::create({out}, true), name + ".bias", ParamKind::bias};
        l->stride = s;
        l->pad = p;
        return l;
    }
    std::unique_ptr<BatchNorm2d> bn(const std::string& name, int channels) {
        auto l = std::make_unique<BatchNorm2d>();
        l->name = name;
        auto g = Tensor::create({channels}, true);
        std::fill(g->data.begin(), g->data.end(), 1.0);
        l->gamma = {g, name + ".gamma", ParamKind::bn_scale};
        l->beta = {Tensor::create({channels}, true), name + ".beta", ParamKind::bn_shift};
        l->running_mean.assign(channels, 0.0);
        l->running_var.assign(channels, 1.0);
        return l;
    }
    std::unique_ptr<Act> act(Act::Kind kind) {
        auto l = std::make_unique<Act>();
        l->kind = kind;
        return l;
    }
    std::unique_ptr<ResBlock> resblock(const std::string& name, int channels, Act::Kind kind) {
        auto l = std::make_unique<ResBlock>();
        l->name = name;
        l->c1 = conv(name + ".conv1", channels, channels, 3, 1, 1);
        l->n1 = bn(name + ".bn1", channels);
        l->c2 = conv(name + ".conv2", channels, channels, 3, 1, 1);
        l->n2 = bn(name + ".bn2", channels);
        l->act = kind;
        return l;
    }
};

int stages_for(int image_size) {
    // spatial stack bottoms out at 4x4
    int s = 0, sz = image_size;
    while (sz > 4) {
        if (sz % 2 != 0) throw ContractError("unsupported image_size");
        sz /= 2;
        ++s;
    }
    return s;
}

void validate_image_size(const ModelConfig& cfg) {
    if (cfg.family == Family::linear_ae) return;
    const int sz = cfg.image_size;
    if (sz < 8 || (sz & (sz - 1)) != 0)
        throw ContractError("unsupported image_size " + std::to_string(sz) +
                            " (need a power of two >= 8)");
}

// Generator / decoder: fc -> 4x4 feature map -> conv-transpose stack -> tanh.
// Shared by the GAN generators and the conv VAE/AE decoders so decoder tickets
// transfer onto generators without reshaping.
void build_generator(Builder& bld, GenerativeNetwork& net,
                     std::vector<std::unique_ptr<Layer>>& layers, const std::string& prefix,
                     int latent, int base_channels, int image_size, int out_channels,
                     bool residual) {
    const int s = stages_for(image_size);
    std::vector<int> ch(s + 1);
    for (int i = 0; i < s; ++i) ch[i] = base_channels << (s - 1 - i);
    ch[s] = out_channels;

    auto fc = bld.linear(prefix + ".fc", latent, ch[0] * 16);
    const std::string fc_w = fc->W.name, fc_b = fc->b.name;
    layers.push_back(std::move(fc));
    auto rs = std::make_unique<ReshapeTo4d>();
    rs->h = rs->w = 4;
    layers.push_back(std::move(rs));
    auto bn0 = bld.bn(prefix + ".bn0", ch[0]);
    const std::string bn0_name = bn0->name;
    layers.push_back(std::move(bn0));
    layers.push_back(bld.act(Act::relu));

    ChannelGroup cur;
    cur.bn_names = {bn0_name};
    cur.channels = ch[0];
    cur.producers = {{fc_w, 0, 16}, {fc_b, 0, 16}};

    int rb_budget = residual ? 2 : 0;
    auto maybe_resblock = [&](int channels, ChannelGroup& enclosing) {
        // for single-stage nets both blocks land after bn0
        const int count = (s == 1) ? rb_budget : (rb_budget > 0 ? 1 : 0);
        for (int k = 0; k < count; ++k) {
            auto rb = bld.resblock(prefix + ".res" + std::to_string(2 - rb_budget), channels,
                                   Act::relu);
            enclosing.bn_names.push_back(rb->n2->name);
            enclosing.producers.push_back({rb->c2->W.name, 0, 1});
            enclosing.producers.push_back({rb->c2->b.name, 0, 1});
            enclosing.consumers.push_back({rb->c1->W.name, 1, 1});
            ChannelGroup inner;
            inner.bn_names = {rb->n1->name};
            inner.channels = channels;
            inner.producers = {{rb->c1->W.name, 0, 1}, {rb->c1->b.name, 0, 1}};
            inner.consumers = {{rb->c2->W.name, 1, 1}};
            net.channel_groups.push_back(std::move(inner));
            layers.push_back(std::move(rb));
            --rb_budget;
        }
    };
    maybe_resblock(ch[0], cur);

    for (int i = 1; i <= s; ++i) {
        auto ct = bld.convt(prefix + ".deconv" + std::to_string(i), ch[i - 1], ch[i], 4, 2, 1);
        cur.consumers.push_back({ct->W.name, 0, 1});
        const std::string ct_w = ct->W.name, ct_b = ct->b.name;
        layers.push_back(std::move(ct));
        net.channel_groups.push_back(std::move(cur));
        cur = ChannelGroup{};
        if (i < s) {
            auto bni = bld.bn(prefix + ".bn" + std::to_string(i), ch[i]);
            cur.bn_names = {bni->name};
            cur.channels = ch[i];
            cur.producers = {{ct_w, 1, 1}, {ct_b, 0, 1}};
            layers.push_back(std::move(bni));
            layers.push_back(bld.act(Act::relu));
            maybe_resblock(ch[i], cur);
        } else {
            layers.push_back(bld.act(Act::tanh));
        }
    }
}

// Encoder / discriminator: conv stack down to 4x4, then fc head(s).
// head_dims lists output widths; the caller wires heads (plain fc for AE/D,
// mu/logvar pair for VAEs).
struct EncoderInfo {
    int feature_dim = 0;       // flattened width before the head
    int last_group_index = -1;  // deepest conv group in net.channel_groups
};

void build_encoder_trunk(Builder& bld, GenerativeNetwork& net,
                         std::vector<std::unique_ptr<Layer>>& layers, const std::string& prefix,
                         int base_channels, int image_size, int in_channels, bool residual,
                         Act::Kind act_kind, EncoderInfo& info) {
    const int s = stages_for(image_size);
    std::vector<int> ch(s + 1);
    ch[0] = in_channels;
    for (int i = 1; i <= s; ++i) ch[i] = base_channels << (i - 1);

    layers.push_back(bld.conv(prefix + ".conv1", ch[0], ch[1], 4, 2, 1));
    layers.push_back(bld.act(act_kind));

    int group_index = -1;
    for (int i = 2; i <= s; ++i) {
        auto cv = bld.conv(prefix + ".conv" + std::to_string(i), ch[i - 1], ch[i], 4, 2, 1);
        const std::string cv_w = cv->W.name, cv_b = cv->b.name;
        layers.push_back(std::move(cv));
        auto bni = bld.bn(prefix + ".bn" + std::to_string(i), ch[i]);
        ChannelGroup gi;
        gi.bn_names = {bni->name};
        gi.channels = ch[i];
        gi.producers = {{cv_w, 0, 1}, {cv_b, 0, 1}};
        layers.push_back(std::move(bni));
        layers.push_back(bld.act(act_kind));
        net.channel_groups.push_back(std::move(gi));
        group_index = static_cast<int>(net.channel_groups.size()) - 1;
        if (i < s)
            net.channel_groups[group_index].consumers.push_back(
                {prefix + ".conv" + std::to_string(i + 1) + ".weight", 1, 1});
    }

    if (residual && group_index >= 0) {
        // two channel-preserving blocks on the deepest feature map
        for (int k = 0; k < 2; ++k) {
            auto rb = bld.resblock(prefix + ".res" + std::to_string(k), ch[s], act_kind);
            auto& g = net.channel_groups[group_index];
            g.bn_names.push_back(rb->n2->name);
            g.producers.push_back({rb->c2->W.name, 0, 1});
            g.producers.push_back({rb->c2->b.name, 0, 1});
            g.consumers.push_back({rb->c1->W.name, 1, 1});
            ChannelGroup inner;
            inner.bn_names = {rb->n1->name};
            inner.channels = ch[s];
            inner.producers = {{rb->c1->W.name, 0, 1}, {rb->c1->b.name, 0, 1}};
            inner.consumers = {{rb->c2->W.name, 1, 1}};
            net.channel_groups.push_back(std::move(inner));
            layers.push_back(std::move(rb));
        }
    }
    layers.push_back(std::make_unique<Flatten>());
    info.feature_dim = ch[s] * 16;
    info.last_group_index = group_index;
}

}  // namespace

GenerativeNetwork build_model(const ModelConfig& cfg_in, std::uint64_t seed) {
    ModelConfig cfg = cfg_in;
    if (cfg.lr <= 0.0) cfg.lr = family_lr(cfg);
    if (cfg.adam_beta1 <= 0.0) cfg.adam_beta1 = family_beta1(cfg);
    validate_image_size(cfg);
    GenerativeNetwork net;
    net.cfg = cfg;
    Builder bld(seed * 0x9e3779b97f4a7c15ull + 1);

    const int C = cfg.base_channels;
    switch (cfg.family) {
        case Family::linear_ae: {
            const int D = cfg.input_dim > 0
                              ? cfg.input_dim
                              : cfg.image_size * cfg.image_size * cfg.in_channels;
            const int hidden = std::max(8, std::min(64, (D + 3) / 4));
            net.a.push_back(std::make_unique<Flatten>());
            net.a.push_back(bld.linear("a.fc1", D, hidden));
            net.a.push_back(bld.act(Act::relu));
            net.a.push_back(bld.linear("a.fc2", hidden, cfg.latent_dim));
            net.b.push_back(bld.linear("b.fc1", cfg.latent_dim, hidden));
            net.b.push_back(bld.act(Act::relu));
            net.b.push_back(bld.linear("b.fc2", hidden, D));
            net.b.push_back(bld.act(Act::tanh));
            break;
        }
        case Family::conv_ae: {
            EncoderInfo info;
            build_encoder_trunk(bld, net, net.a, "a", C, cfg.image_size, cfg.in_channels,
                                false, Act::relu, info);
            net.a.push_back(bld.linear("a.fc", info.feature_dim, cfg.latent_dim));
            if (info.last_group_index >= 0)
                net.channel_groups[info.last_group_index].consumers.push_back(
                    {"a.fc.weight", 1, 16});
            build_generator(bld, net, net.b, "b", cfg.latent_dim, C, cfg.image_size,
                            cfg.in_channels, false);
            break;
        }
        case Family::vae:
        case Family::beta_vae:
        case Family::resnet_vae: {
            const bool res = cfg.family == Family::resnet_vae;
            EncoderInfo info;
            build_encoder_trunk(bld, net, net.a, "a", C, cfg.image_size, cfg.in_channels, res,
                                Act::relu, info);
            net.head_mu = bld.linear("a.mu", info.feature_dim, cfg.latent_dim);
            net.head_logvar = bld.linear("a.logvar", info.feature_dim, cfg.latent_dim);
            if (info.last_group_index >= 0) {
                net.channel_groups[info.last_group_index].consumers.push_back({"a.mu.weight", 1, 16});
                net.channel_groups[info.last_group_index].consumers.push_back({"a.logvar.weight", 1, 16});
            }
            build_generator(bld, net, net.b, "b", cfg.latent_dim, C, cfg.image_size,
                            cfg.in_channels, res);
            break;
        }
        case Family::dcgan:
        case Family::sngan:
        case Family::wgan:
        case Family::resnet_gan: {
            const bool res = cfg.family == Family::resnet_gan;
            const bool sn = cfg.family == Family::sngan;
            build_generator(bld, net, net.a, "a", cfg.latent_dim, C, cfg.image_size,
                            cfg.in_channels, res);
            EncoderInfo info;
            build_encoder_trunk(bld, net, net.b, "b", C, cfg.image_size, cfg.in_channels, res,
                                Act::lrelu, info);
            net.b.push_back(bld.linear("b.fc", info.feature_dim, 1, sn));
            if (info.last_group_index >= 0)
                net.channel_groups[info.last_group_index].consumers.push_back(
                    {"b.fc.weight", 1, 16});
            if (sn) {
                for (auto& l : net.b) {
                    if (auto* cv = dynamic_cast<Conv2d*>(l.get())) cv->spectral = true;
                    if (auto* rb = dynamic_cast<ResBlock*>(l.get())) {
                        rb->c1->spectral = true;
                        rb->c2->spectral = true;
                    }
                }
            }
            break;
        }
    }
    return net;
}

// ---- network plumbing ----

std::vector<Parameter*> GenerativeNetwork::params() {
    std::vector<Parameter*> out;
    for (auto& l : a) l->collect(out);
    if (head_mu) head_mu->collect(out);
    if (head_logvar) head_logvar->collect(out);
    for (auto& l : b) l->collect(out);
    return out;
}

std::vector<Parameter*> GenerativeNetwork::params_component(char which) {
    std::vector<Parameter*> out;
    if (which == 'a') {
        for (auto& l : a) l->collect(out);
        if (head_mu) head_mu->collect(out);
        if (head_logvar) head_logvar->collect(out);
    } else {
        for (auto& l : b) l->collect(out);
    }
    return out;
}

std::map<std::string, Parameter*> GenerativeNetwork::param_map() {
    std::map<std::string, Parameter*> out;
    for (Parameter* p : params()) out[p->name] = p;
    return out;
}

namespace {
void collect_bns(std::vector<std::unique_ptr<Layer>>& layers,
                 std::vector<std::pair<std::string, BatchNorm2d*>>& out) {
    for (auto& l : layers) {
        if (auto* bn = dynamic_cast<BatchNorm2d*>(l.get())) out.emplace_back(bn->name, bn);
        if (auto* rb = dynamic_cast<ResBlock*>(l.get())) {
            out.emplace_back(rb->n1->name, rb->n1.get());
            out.emplace_back(rb->n2->name, rb->n2.get());
        }
    }
}
}  // namespace

std::vector<std::pair<std::string, BatchNorm2d*>> GenerativeNetwork::batchnorms() {
    std::vector<std::pair<std::string, BatchNorm2d*>> out;
    collect_bns(a, out);
    collect_bns(b, out);
    return out;
}

std::int64_t GenerativeNetwork::param_count() {
    std::int64_t n = 0;
    for (Parameter* p : params()) n += p->tensor->size();
    return n;
}

NamedWeights GenerativeNetwork::snapshot() {
    NamedWeights w;
    for (Parameter* p : params()) w[p->name] = p->tensor->data;
    return w;
}

void GenerativeNetwork::restore(const NamedWeights& w) {
    for (Parameter* p : params()) {
        auto it = w.find(p->name);
        if (it == w.end() || it->second.size() != p->tensor->data.size())
            throw ContractError("restore: snapshot does not cover parameter '" + p->name + "'");
        p->tensor->data = it->second;
    }
}

GenerativeNetwork GenerativeNetwork::clone() const {
    GenerativeNetwork n;
    n.cfg = cfg;
    n.channel_groups = channel_groups;
    for (const auto& l : a) n.a.push_back(l->clone());
    for (const auto& l : b) n.b.push_back(l->clone());
    if (head_mu) n.head_mu.reset(static_cast<Linear*>(head_mu->clone().release()));
    if (head_logvar) n.head_logvar.reset(static_cast<Linear*>(head_logvar->clone().release()));
    return n;
}

TensorPtr run_component(Tape& tape, std::vector<std::unique_ptr<Layer>>& layers,
                        const TensorPtr& x, bool training) {
    TensorPtr h = x;
    for (auto& l : layers) h = l->forward(tape, h, training);
    return h;
}

VaeEncoding encode_vae(Tape& tape, GenerativeNetwork& net, const TensorPtr& x, bool training) {
    if (!net.head_mu) throw ContractError("encode_vae: not a VAE family network");
    auto h = run_component(tape, net.a, x, training);
    return {net.head_mu->forward(tape, h, training),
            net.head_logvar->forward(tape, h, training)};
}

TensorPtr reparameterize(Tape& tape, const TensorPtr& mu, const TensorPtr& logvar, Rng& rng) {
    if (mu->shape != logvar->shape)
        throw DimError("reparameterize: shapes " + shape_str(mu->shape) + " vs " +
                       shape_str(logvar->shape));
    auto eps = Tensor::create(mu->shape);
    for (double& v : eps->data) v = rng.normal();
    auto lv = clamp_op(tape, logvar, -30.0, 30.0);
    auto std = exp_op(tape, scale(tape, lv, 0.5));
    return add(tape, mu, mul(tape, std, eps));
}

TensorPtr generate(GenerativeNetwork& net, int n, Rng& rng) {
    if (is_ae(net.cfg.family))
        throw ContractError("generate: AE families have no sampling prior; use reconstruct()");
    auto z = Tensor::create({n, net.cfg.latent_dim});
    for (double& v : z->data) v = rng.normal();
    if (n == 0) {
        return Tensor::create(
            {0, net.cfg.in_channels, net.cfg.image_size, net.cfg.image_size});
    }
    Tape tape;  // discarded; eval mode records nothing of consequence
    auto* layers = is_gan(net.cfg.family) ? &net.a : &net.b;
    auto out = run_component(tape, *layers, z, false);
    tape.clear();
    return out;
}

TensorPtr reconstruct(GenerativeNetwork& net, const TensorPtr& inputs) {
    Tape tape;
    TensorPtr out;
    if (is_vae(net.cfg.family)) {
        auto enc = encode_vae(tape, net, inputs, false);
        out = run_component(tape, net.b, enc.mu, false);  // mean decode
    } else if (is_ae(net.cfg.family)) {
        auto z = run_component(tape, net.a, inputs, false);
        out = run_component(tape, net.b, z, false);
        if (net.cfg.family == Family::linear_ae && out->shape != inputs->shape)
            out = reshape(tape, out, inputs->shape);
    } else {
        throw ContractError("reconstruct: GAN families generate, they do not reconstruct");
    }
    tape.clear();
    return out;
}

// ---- training ----

std::int64_t iterations_per_epoch(const io::Dataset& data, int batch_size) {
    return data.images->shape[0] / batch_size;
}

void apply_mask(GenerativeNetwork& net, const MaskMap& mask) {
    auto pm = net.param_map();
    std::string bad;
    for (const auto& [name, bits] : mask) {
        auto it = pm.find(name);
        if (it == pm.end() || it->second->tensor->data.size() != bits.size()) {
            bad += (bad.empty() ? "" : ", ") + name;
            continue;
        }
        auto& d = it->second->tensor->data;
        for (std::size_t i = 0; i < bits.size(); ++i)
            if (!bits[i]) d[i] = 0.0;
    }
    if (!bad.empty())
        throw ContractError("apply_mask: mask does not match parameters: " + bad);
}

namespace {

void zero_grads(std::vector<Parameter*>& ps) {
    for (Parameter* p : ps) p->tensor->zero_grad();
}

void snapshot_if_due(GenerativeNetwork& net, const TrainOptions& opt, TrainState& st,
                     TrainReport& report) {
    for (std::int64_t at : opt.checkpoint_at)
        if (at == st.iteration && !report.checkpoints.count(at))
            report.checkpoints[at] = net.snapshot();
}

TensorPtr batch_of(const io::Dataset& data, const std::vector<int>& order, std::int64_t start,
                   int bs) {
    const Shape& s = data.images->shape;
    const std::int64_t item = static_cast<std::int64_t>(s[1]) * s[2] * s[3];
    auto t = Tensor::create({bs, s[1], s[2], s[3]});
    for (int i = 0; i < bs; ++i)
        std::copy_n(data.images->data.begin() + order[start + i] * item, item,
                    t->data.begin() + i * item);
    return t;
}

}  // namespace

void init_train_state(GenerativeNetwork& net, const TrainOptions& opt, TrainState& st) {
    st.rng = std::make_unique<Rng>(opt.seed * 0x9e3779b97f4a7c15ull + 7);
    st.opt_a.lr = st.opt_b.lr = net.cfg.lr;
    st.opt_a.beta1 = st.opt_b.beta1 = net.cfg.adam_beta1;
    if (net.cfg.family == Family::wgan) st.opt_b.clip = net.cfg.wgan_clip;
    st.iteration = 0;
    st.flops = 0;
}

void train_epoch(GenerativeNetwork& net, const io::Dataset& data, const TrainOptions& opt,
                 TrainState& st, TrainReport& report, int epoch_index) {
    const Family fam = net.cfg.family;
    const int bs = std::min<int>(opt.batch_size, data.images->shape[0]);
    const std::int64_t nb = data.images->shape[0] / bs;
    auto params_a = net.params_component('a');
    auto params_b = net.params_component('b');
    auto all_params = net.params();

    std::vector<int> order(data.images->shape[0]);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), st.rng->gen);

    double sum_a = 0.0, sum_b = 0.0, sum_recon = 0.0, sum_kl = 0.0;
    std::int64_t steps_a = 0, steps_b = 0;

    const std::int64_t comp_a_fwd =
        eb::component_forward_flops(net.a, is_gan(fam)
                                               ? std::vector<int>{bs, net.cfg.latent_dim}
                                               : std::vector<int>{bs, data.images->shape[1],
                                                                  data.images->shape[2],
                                                                  data.images->shape[3]});
    const std::int64_t comp_b_fwd = eb::component_forward_flops(
        net.b, is_gan(fam) ? std::vector<int>{bs, data.images->shape[1], data.images->shape[2],
                                              data.images->shape[3]}
                           : std::vector<int>{bs, net.cfg.latent_dim});

    try {
        for (std::int64_t bi = 0; bi < nb; ++bi) {
            auto x = batch_of(data, order, bi * bs, bs);

            if (is_gan(fam)) {
                const bool wass = fam == Family::wgan;
                // discriminator / critic step
                {
                    Tape tape;
                    auto z = Tensor::create({bs, net.cfg.latent_dim});
                    for (double& v : z->data) v = st.rng->normal();
                    auto fake = run_component(tape, net.a, z, true);
                    auto fake_d = Tensor::from_data(fake->shape, fake->data);  // detached
                    tape.clear();

                    Tape dtape;
                    auto d_real = run_component(dtape, net.b, x, true);
                    auto d_fake = run_component(dtape, net.b, fake_d, true);
                    TensorPtr loss_d;
                    if (wass) {
                        loss_d = add(dtape, mean_op(dtape, d_fake),
                                     neg(dtape, mean_op(dtape, d_real)));
                    } else {
                        auto ones = Tensor::create(d_real->shape);
                        std::fill(ones->data.begin(), ones->data.end(), 1.0);
                        auto zeros = Tensor::create(d_fake->shape);
                        loss_d = add(dtape, bce_with_logits_loss(dtape, d_real, ones),
                                     bce_with_logits_loss(dtape, d_fake, zeros));
                    }
                    zero_grads(all_params);
                    backward(dtape, loss_d);
                    adam_step(params_b, st.opt_b);
                    if (opt.mask) apply_mask(net, *opt.mask);
                    sum_b += loss_d->data[0];
                    ++steps_b;
                    st.flops += comp_a_fwd + 3 * 2 * comp_b_fwd;  // G sample + D fwd/bwd on 2 batches
                }
                // generator step every critic_steps batches
                if ((bi + 1) % net.cfg.critic_steps == 0) {
                    Tape tape;
                    auto z = Tensor::create({bs, net.cfg.latent_dim});
                    for (double& v : z->data) v = st.rng->normal();
                    auto fake = run_component(tape, net.a, z, true);
                    auto d_fake = run_component(tape, net.b, fake, true);
                    TensorPtr loss_g;
                    if (wass) {
                        loss_g = neg(tape, mean_op(tape, d_fake));
                    } else {
                        auto ones = Tensor::create(d_fake->shape);
                        std::fill(ones->data.begin(), ones->data.end(), 1.0);
                        loss_g = bce_with_logits_loss(tape, d_fake, ones);
                    }
                    zero_grads(all_params);
                    backward(tape, loss_g);
                    adam_step(params_a, st.opt_a);
                    if (opt.mask) apply_mask(net, *opt.mask);
                    sum_a += loss_g->data[0];
                    ++steps_a;
                    st.iteration += 1;
                    st.flops += 3 * (comp_a_fwd + comp_b_fwd);
                    snapshot_if_due(net, opt, st, report);
                }
            } else if (is_vae(fam)) {
                Tape tape;
                auto enc = encode_vae(tape, net, x, true);
                auto zs = reparameterize(tape, enc.mu, enc.logvar, *st.rng);
                auto xh = run_component(tape, net.b, zs, true);
                auto recon = mse_loss(tape, xh, x);
                auto kl = gaussian_kl_loss(tape, enc.mu, enc.logvar, 1.0);
                auto total = add(tape, recon, scale(tape, kl, net.cfg.beta));
                zero_grads(all_params);
                backward(tape, total);
                adam_step(params_a, st.opt_a);
                adam_step(params_b, st.opt_b);
                if (opt.mask) apply_mask(net, *opt.mask);
                sum_a += total->data[0];
                sum_b += total->data[0];
                sum_recon += recon->data[0];
                sum_kl += kl->data[0];
                ++steps_a;
                ++steps_b;
                st.iteration += 1;
                st.flops += 3 * (comp_a_fwd + comp_b_fwd);
                snapshot_if_due(net, opt, st, report);
            } else {  // AE families
                Tape tape;
                auto z = run_component(tape, net.a, x, true);
                auto xh = run_component(tape, net.b, z, true);
                if (xh->shape != x->shape) xh = reshape(tape, xh, x->shape);
                auto loss = mse_loss(tape, xh, x);
                zero_grads(all_params);
                backward(tape, loss);
                adam_step(params_a, st.opt_a);
                adam_step(params_b, st.opt_b);
                if (opt.mask) apply_mask(net, *opt.mask);
                sum_a += loss->data[0];
                sum_b += loss->data[0];
                ++steps_a;
                ++steps_b;
                st.iteration += 1;
                st.flops += 3 * (comp_a_fwd + comp_b_fwd);
                snapshot_if_due(net, opt, st, report);
            }
        }
    } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch_index) + ": " + e.what());
    }

    report.loss_a.push_back(steps_a ? sum_a / static_cast<double>(steps_a) : 0.0);
    report.loss_b.push_back(steps_b ? sum_b / static_cast<double>(steps_b) : 0.0);
    if (is_vae(fam)) {
        report.recon_curve.push_back(steps_a ? sum_recon / static_cast<double>(steps_a) : 0.0);
        report.kl_curve.push_back(steps_a ? sum_kl / static_cast<double>(steps_a) : 0.0);
    }
    report.flops_per_epoch.push_back(st.flops);
    report.final_iteration = st.iteration;
}

TrainReport train(GenerativeNetwork& net, const io::Dataset& data, const TrainOptions& opt) {
    if (!data.images || data.images->shape.empty() || data.images->shape[0] == 0)
        throw ContractError("train: empty dataset");
    if (opt.mask) {
        // validate names/shapes up front so errors carry offending names
        apply_mask(net, *opt.mask);
    }
    TrainReport report;
    TrainState st;
    init_train_state(net, opt, st);
    const auto t0 = std::chrono::steady_clock::now();
    snapshot_if_due(net, opt, st, report);  // iteration 0 == initial weights
    for (int e = 0; e < opt.epochs; ++e) train_epoch(net, data, opt, st, report, e);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

double eval_loss(GenerativeNetwork& net, const io::Dataset& data, std::uint64_t seed) {
    const Family fam = net.cfg.family;
    const int n = data.images->shape[0];
    const int bs = std::min(64, n);
    double acc = 0.0;
    std::int64_t count = 0;
    Rng rng(seed);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int start = 0; start + bs <= n; start += bs) {
        auto x = batch_of(data, order, start, bs);
        Tape tape;
        if (is_gan(fam)) {
            auto z = Tensor::create({bs, net.cfg.latent_dim});
            for (double& v : z->data) v = rng.normal();
            auto fake = run_component(tape, net.a, z, false);
            auto d_real = run_component(tape, net.b, x, false);
            auto d_fake = run_component(tape, net.b, fake, false);
            if (fam == Family::wgan) {
                double mf = 0.0, mr = 0.0;
                for (double v : d_fake->data) mf += v;
                for (double v : d_real->data) mr += v;
                acc += mf / bs - mr / bs;
            } else {
                auto ones = Tensor::create(d_real->shape);
                std::fill(ones->data.begin(), ones->data.end(), 1.0);
                auto zeros = Tensor::create(d_fake->shape);
                auto l = add(tape, bce_with_logits_loss(tape, d_real, ones),
                             bce_with_logits_loss(tape, d_fake, zeros));
                acc += l->data[0];
            }
        } else {
            TensorPtr xh;
            if (is_vae(fam)) {
                auto enc = encode_vae(tape, net, x, false);
                xh = run_component(tape, net.b, enc.mu, false);
            } else {
                auto z = run_component(tape, net.a, x, false);
                xh = run_component(tape, net.b, z, false);
                if (xh->shape != x->shape) xh = reshape(tape, xh, x->shape);
            }
            acc += mse_loss(tape, xh, x)->data[0];
        }
        tape.clear();
        ++count;
    }
    return count ? acc / static_cast<double>(count) : 0.0;
}

}  // namespace tl::models
