#pragma once

// Desk-scale generative model zoo: linear/conv AutoEncoders, VAE variants and
// the GAN family, with their training loops and structural metadata used by
// channel pruning.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ticketlab/dataio.hpp"
#include "ticketlab/tensor.hpp"

namespace tl::models {

enum class Family {
    linear_ae, conv_ae, vae, beta_vae, resnet_vae, dcgan, sngan, wgan, resnet_gan
};

std::string family_name(Family f);
Family family_from_name(const std::string& s);
bool is_gan(Family f);
bool is_vae(Family f);
bool is_ae(Family f);

struct ModelConfig {
    Family family = Family::dcgan;
    int latent_dim = 32;
    int base_channels = 16;
    int image_size = 16;   // power of two >= 8 for conv families
    int in_channels = 1;
    int input_dim = 0;     // linear_ae only; 0 derives from image_size
    double beta = 1.0;     // KL weight (beta_vae > 0, vae == 1)
    double wgan_clip = 0.0;  // >0 for wgan
    int critic_steps = 1;
    double lr = 0.0;       // 0 picks the family default
    double adam_beta1 = 0.0;  // 0 picks the family default
};

ModelConfig default_config(Family f);

// ---- layers ----

struct Layer {
    std::string name;
    virtual ~Layer() = default;
    virtual TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) = 0;
    virtual void collect(std::vector<Parameter*>& out) {}
    virtual std::unique_ptr<Layer> clone() const = 0;
};

struct Linear : Layer {
    Parameter W, b;  // W: (out, in)
    bool spectral = false;
    SpectralState sn;
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    void collect(std::vector<Parameter*>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct Conv2d : Layer {
    Parameter W, b;  // W: (out, in, k, k)
    int stride = 1, pad = 0;
    bool spectral = false;
    SpectralState sn;
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    void collect(std::vector<Parameter*>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct ConvT2d : Layer {
    Parameter W, b;  // W: (in, out, k, k)
    int stride = 1, pad = 0;
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    void collect(std::vector<Parameter*>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct BatchNorm2d : Layer {
    Parameter gamma, beta;
    std::vector<double> running_mean, running_var;
    double momentum = 0.1, eps = 1e-5;
    int channels() const { return static_cast<int>(gamma.tensor->size()); }
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    void collect(std::vector<Parameter*>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

struct Act : Layer {
    enum Kind { relu, lrelu, tanh, sigmoid } kind = relu;
    double slope = 0.2;
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    std::unique_ptr<Layer> clone() const override;
};

// (N, F) -> (N, F/(h*w), h, w); channel count inferred so compression just works
struct ReshapeTo4d : Layer {
    int h = 4, w = 4;
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    std::unique_ptr<Layer> clone() const override;
};

struct Flatten : Layer {
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    std::unique_ptr<Layer> clone() const override;
};

// out = act(x + bn2(conv2(act(bn1(conv1(x)))))), 3x3 convs, channel-preserving
struct ResBlock : Layer {
    std::unique_ptr<Conv2d> c1, c2;
    std::unique_ptr<BatchNorm2d> n1, n2;
    Act::Kind act = Act::relu;
    TensorPtr forward(Tape& tape, const TensorPtr& x, bool training) override;
    void collect(std::vector<Parameter*>& out) override;
    std::unique_ptr<Layer> clone() const override;
};

// ---- channel-group metadata (consumed by the earlybird module) ----

struct SliceRef {
    std::string param;  // parameter name
    int axis = 0;       // axis indexed by channel
    int group = 1;      // contiguous entries per channel along that axis
};

struct ChannelGroup {
    std::vector<std::string> bn_names;  // batchnorm layers sharing this keep-set
    std::vector<SliceRef> producers;
    std::vector<SliceRef> consumers;
    int channels = 0;
};

// ---- network ----

using NamedWeights = std::map<std::string, std::vector<double>>;

struct GenerativeNetwork {
    ModelConfig cfg;
    std::vector<std::unique_ptr<Layer>> a;  // encoder or generator
    std::vector<std::unique_ptr<Layer>> b;  // decoder or discriminator/critic
    std::unique_ptr<Linear> head_mu, head_logvar;  // VAE families only
    std::vector<ChannelGroup> channel_groups;

    std::vector<Parameter*> params();
    std::vector<Parameter*> params_component(char which);  // 'a' or 'b'
    std::map<std::string, Parameter*> param_map();
    std::vector<std::pair<std::string, BatchNorm2d*>> batchnorms();
    std::int64_t param_count();

    NamedWeights snapshot();
    void restore(const NamedWeights& w);

    GenerativeNetwork clone() const;
};

GenerativeNetwork build_model(const ModelConfig& cfg, std::uint64_t seed);

// forward helpers (explicit tape; pass a throwaway tape for no-grad use)
TensorPtr run_component(Tape& tape, std::vector<std::unique_ptr<Layer>>& layers,
                        const TensorPtr& x, bool training);
// VAE encoder: trunk + the two heads
struct VaeEncoding { TensorPtr mu, logvar; };
VaeEncoding encode_vae(Tape& tape, GenerativeNetwork& net, const TensorPtr& x, bool training);
TensorPtr reparameterize(Tape& tape, const TensorPtr& mu, const TensorPtr& logvar, Rng& rng);

// Samples n images from the model prior (GAN/VAE); errors for AE families.
TensorPtr generate(GenerativeNetwork& net, int n, Rng& rng);
// AE/VAE reconstructions of the given inputs (eval mode).
TensorPtr reconstruct(GenerativeNetwork& net, const TensorPtr& inputs);

// ---- training ----

using MaskMap = std::map<std::string, std::vector<std::uint8_t>>;

struct TrainOptions {
    int epochs = 10;
    int batch_size = 32;
    std::uint64_t seed = 0;
    const MaskMap* mask = nullptr;
    std::vector<std::int64_t> checkpoint_at;  // global iteration indices; 0 = init
};

struct TrainReport {
    std::vector<double> loss_a, loss_b;              // per-epoch means, one per component
    std::vector<double> recon_curve, kl_curve;       // VAE decomposition terms
    double wall_seconds = 0.0;
    std::vector<std::int64_t> flops_per_epoch;       // cumulative at each epoch end
    std::int64_t final_iteration = 0;
    std::map<std::int64_t, NamedWeights> checkpoints;
};

struct TrainState {
    OptimizerState opt_a, opt_b;
    std::unique_ptr<Rng> rng;
    std::int64_t iteration = 0;
    std::int64_t flops = 0;
};

void apply_mask(GenerativeNetwork& net, const MaskMap& mask);
void init_train_state(GenerativeNetwork& net, const TrainOptions& opt, TrainState& st);
void train_epoch(GenerativeNetwork& net, const io::Dataset& data, const TrainOptions& opt,
                 TrainState& st, TrainReport& report, int epoch_index);
TrainReport train(GenerativeNetwork& net, const io::Dataset& data, const TrainOptions& opt);

// mean family-appropriate evaluation loss on a dataset (reconstruction MSE for
// AE/VAE; BCE or Wasserstein discriminator loss for GANs), eval mode
double eval_loss(GenerativeNetwork& net, const io::Dataset& data, std::uint64_t seed = 1234);

std::int64_t iterations_per_epoch(const io::Dataset& data, int batch_size);

}  // namespace tl::models
