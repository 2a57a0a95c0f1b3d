#include "frboost/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace frboost::nn {

using namespace ag;

Var dropout(const Var& x, double p, const TrainCtx& ctx) {
  if (!ctx.training || p <= 0.0) return x;
  if (!ctx.rng) throw std::logic_error("dropout: training ctx without rng");
  const double keep = 1.0 - p;
  Tensor mask(x.shape());
  for (auto& m : mask.d) m = ctx.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return mul(x, Var::constant(std::move(mask)));
}

Linear::Linear(int in, int out, Rng& rng, bool with_bias, double gain) : bias(with_bias) {
  Tensor wt = Tensor::randn({out, in}, rng);
  wt.scale_(gain / std::sqrt(static_cast<double>(in)));
  w = Var::param(std::move(wt));
  if (bias) b = Var::param(Tensor({out}));
}

Var Linear::forward(const Var& x) const {
  Var y = matmul(x, w, false, true);
  if (bias) y = suffix_add(y, b);
  return y;
}

void Linear::collect(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".w", w);
  if (bias) reg.add(prefix + ".b", b);
}

Conv2d::Conv2d(int in, int out, int k, int stride_, int pad_, Rng& rng, bool with_bias, double gain)
    : stride(stride_), pad(pad_), bias(with_bias) {
  Tensor wt = Tensor::randn({out, in, k, k}, rng);
  wt.scale_(gain / std::sqrt(static_cast<double>(in) * k * k));
  w = Var::param(std::move(wt));
  if (bias) b = Var::param(Tensor({out}));
}

Var Conv2d::forward(const Var& x) const {
  Var y = conv2d(x, w, stride, pad);
  if (bias) y = channel_add(y, b);
  return y;
}

void Conv2d::collect(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".w", w);
  if (bias) reg.add(prefix + ".b", b);
}

BatchNorm2d::BatchNorm2d(int c) {
  gamma = Var::param(Tensor::full({c}, 1.0));
  beta = Var::param(Tensor({c}));
  st.init(c);
}

Var BatchNorm2d::forward(const Var& x, const TrainCtx& ctx, bool update_stats) {
  return batch_norm2d(x, gamma, beta, st, ctx.training,
                      ctx.training && update_stats && ctx.bn_update_stats);
}

void BatchNorm2d::collect(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
  reg.add_state(prefix + ".running_mean", &st.running_mean);
  reg.add_state(prefix + ".running_var", &st.running_var);
}

Var BatchNorm1d::forward(const Var& x, const TrainCtx& ctx, bool update_stats) {
  int B = x.shape()[0], D = x.shape()[1];
  Var y = bn.forward(reshape(x, {B, D, 1, 1}), ctx, update_stats);
  return reshape(y, {B, D});
}

PReLU::PReLU(int c, double init) { slope = Var::param(Tensor::full({c}, init)); }

Var PReLU::forward(const Var& x) const {
  return add(clamp_min(x, 0.0), channel_mul(clamp_max(x, 0.0), slope));
}

void PReLU::collect(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".slope", slope);
}

SEBlock::SEBlock(int c, int reduction, Rng& rng) {
  int mid = std::max(1, c / reduction);
  fc1 = Linear(c, mid, rng);
  fc2 = Linear(mid, c, rng);
}

Var SEBlock::forward(const Var& x) const {
  int H = x.shape()[2], W = x.shape()[3];
  Var pooled = mul_scalar(reduce_sum(x, {2, 3}, false), 1.0 / (static_cast<double>(H) * W));
  Var s = sigmoid(fc2.forward(relu(fc1.forward(pooled))));
  return bcast_mul(x, s);
}

void SEBlock::collect(ParamRegistry& reg, const std::string& prefix) const {
  fc1.collect(reg, prefix + ".fc1");
  fc2.collect(reg, prefix + ".fc2");
}

IRSEBlock::IRSEBlock(int in, int out, int stride, int se_reduction, Rng& rng)
    : bn1(in),
      conv1(in, out, 3, 1, 1, rng, false),
      act(out),
      conv2(out, out, 3, stride, 1, rng, false),
      bn2(out),
      use_se(se_reduction > 0) {
  if (use_se) se = SEBlock(out, se_reduction, rng);
  projected = (in != out) || (stride != 1);
  if (projected) {
    short_conv = Conv2d(in, out, 1, stride, 0, rng, false);
    short_bn = BatchNorm2d(out);
  }
}

Var IRSEBlock::forward(const Var& x, const TrainCtx& ctx) {
  Var r = bn1.forward(x, ctx);
  r = dropout(conv1.forward(r), ctx.conv_dropout, ctx);
  r = act.forward(r);
  r = dropout(conv2.forward(r), ctx.conv_dropout, ctx);
  r = bn2.forward(r, ctx);
  if (use_se) r = se.forward(r);
  Var sc = projected ? short_bn.forward(dropout(short_conv.forward(x), ctx.conv_dropout, ctx), ctx)
                     : x;
  return add(r, sc);
}

void IRSEBlock::collect(ParamRegistry& reg, const std::string& prefix) {
  bn1.collect(reg, prefix + ".bn1");
  conv1.collect(reg, prefix + ".conv1");
  act.collect(reg, prefix + ".act");
  conv2.collect(reg, prefix + ".conv2");
  bn2.collect(reg, prefix + ".bn2");
  if (use_se) se.collect(reg, prefix + ".se");
  if (projected) {
    short_conv.collect(reg, prefix + ".short_conv");
    short_bn.collect(reg, prefix + ".short_bn");
  }
}

Trunk::Trunk(const TrunkConfig& cfg_, Rng& rng) : cfg(cfg_) {
  if (cfg.stage_channels.size() != cfg.stage_blocks.size() || cfg.stage_channels.empty())
    throw std::invalid_argument("Trunk: stage_channels/stage_blocks mismatch");
  stem = Conv2d(cfg.in_ch, cfg.stage_channels[0], 3, 1, 1, rng, false);
  stem_bn = BatchNorm2d(cfg.stage_channels[0]);
  stem_act = PReLU(cfg.stage_channels[0]);
  int prev = cfg.stage_channels[0];
  for (size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    int ch = cfg.stage_channels[s];
    for (int bidx = 0; bidx < cfg.stage_blocks[s]; ++bidx) {
      int stride = bidx == 0 ? 2 : 1;
      blocks.emplace_back(prev, ch, stride, cfg.se_reduction, rng);
      prev = ch;
    }
    stage_end.push_back(static_cast<int>(blocks.size()));
  }
}

Var Trunk::forward(const Var& x, const TrainCtx& ctx, std::vector<Var>* taps) {
  Var h = stem_act.forward(stem_bn.forward(dropout(stem.forward(x), ctx.conv_dropout, ctx), ctx));
  if (taps) taps->clear();
  size_t next_stage = 0;
  for (size_t i = 0; i < blocks.size(); ++i) {
    h = blocks[i].forward(h, ctx);
    if (taps && next_stage < stage_end.size() &&
        static_cast<int>(i + 1) == stage_end[next_stage]) {
      taps->push_back(h);
      ++next_stage;
    }
  }
  return h;
}

void Trunk::collect(ParamRegistry& reg, const std::string& prefix) {
  stem.collect(reg, prefix + ".stem");
  stem_bn.collect(reg, prefix + ".stem_bn");
  stem_act.collect(reg, prefix + ".stem_act");
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(reg, prefix + ".block" + std::to_string(i));
}

EmbedHead::EmbedHead(int in_ch_, int in_hw_, int emb_dim, double dropout_p_, Rng& rng)
    : bn_in(in_ch_),
      fc(in_ch_ * in_hw_ * in_hw_, emb_dim, rng),
      bn_out(emb_dim),
      dropout_p(dropout_p_),
      in_ch(in_ch_),
      in_hw(in_hw_) {}

Var EmbedHead::forward(const Var& x, const TrainCtx& ctx) {
  int B = x.shape()[0];
  Var h = bn_in.forward(x, ctx);
  h = dropout(h, dropout_p, ctx);
  h = reshape(h, {B, in_ch * in_hw * in_hw});
  h = fc.forward(h);
  return bn_out.forward(h, ctx);
}

void EmbedHead::collect(ParamRegistry& reg, const std::string& prefix) {
  bn_in.collect(reg, prefix + ".bn_in");
  fc.collect(reg, prefix + ".fc");
  bn_out.collect(reg, prefix + ".bn_out");
}

Var scale_by_scalar(const Var& x, const Var& s) {
  auto shape = x.shape();
  int64_t n = x.value().numel();
  return reshape(bcast_mul(reshape(x, {1, static_cast<int>(n)}), s), shape);
}

Var pixel_norm(const Var& x, double eps) {
  int D = x.shape()[1];
  Var m = mul_scalar(reduce_sum(square(x), {1}, false), 1.0 / D);
  return bcast_mul(x, rsqrt(m, eps));
}

Var l2_normalize_rows(const Var& x, double eps) {
  Var n2 = reduce_sum(square(x), {1}, false);
  return bcast_mul(x, rsqrt(n2, eps));
}

}  // namespace frboost::nn
