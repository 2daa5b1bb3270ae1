#include "vermouth/backbone.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "vermouth/ops.hpp"

namespace vermouth {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kDown: return "down";
    case Stage::kMid: return "mid";
    case Stage::kUp: return "up";
  }
  return "?";
}

StageSet parse_stages(const std::string& s) {
  if (s == "all") return {Stage::kDown, Stage::kMid, Stage::kUp};
  if (s == "none" || s == "w.o." || s.empty()) return {};
  StageSet out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, '+')) {
    if (part == "down") {
      out.insert(Stage::kDown);
    } else if (part == "mid") {
      out.insert(Stage::kMid);
    } else if (part == "up") {
      out.insert(Stage::kUp);
    } else {
      throw std::invalid_argument("unknown U-net stage: " + part);
    }
  }
  return out;
}

std::string to_string(const StageSet& stages) {
  if (stages.empty()) return "none";
  if (stages.size() == 3) return "all";
  std::string out;
  // Listed in the conventional "up+mid" / "down+mid" order.
  for (Stage s : {Stage::kDown, Stage::kUp, Stage::kMid}) {
    if (!stages.count(s)) continue;
    if (!out.empty()) out += "+";
    out += to_string(s);
  }
  return out;
}

void BackboneConfig::validate() const {
  if (image_size <= 0 || latent_size <= 0 || latent_channels <= 0 || base_channels <= 0 || text_dim <= 0 ||
      heads <= 0 || image_channels <= 0) {
    throw std::invalid_argument("backbone dimensions must be positive");
  }
  if (channel_multipliers.empty()) throw std::invalid_argument("backbone needs at least one level");
  if (image_size % latent_size != 0) throw std::invalid_argument("latent size must divide image size");
  if (latent_size % (1 << (levels() - 1)) != 0) {
    throw std::invalid_argument("latent size must be divisible by 2^(levels-1)");
  }
  for (int l = 0; l < levels(); ++l) {
    if (channels(l) <= 0 || channels(l) % heads != 0) {
      throw std::invalid_argument("level channels must be positive and divisible by the head count");
    }
  }
  if (max_time_step < 1) throw std::invalid_argument("max_time_step must be >= 1");
}

BackboneConfig tiny_backbone_config() {
  BackboneConfig cfg;
  cfg.image_size = 16;
  cfg.latent_size = 4;
  cfg.base_channels = 8;
  cfg.text_dim = 16;
  return cfg;
}

int group_count(int channels, int max_groups) {
  int g = std::min(channels, max_groups);
  while (g > 1 && channels % g != 0) --g;
  return std::max(g, 1);
}

template <typename T>
FeatureBundle<T> FeatureBundle<T>::detached() const {
  FeatureBundle out;
  out.meta = meta;
  for (const auto& [k, v] : taps) out.taps.emplace(k, v.detach());
  for (const auto& [k, v] : attn) out.attn.emplace(k, v.detach());
  return out;
}

template <typename T>
std::vector<int> FeatureBundle<T>::levels() const {
  std::set<int> s;
  for (const auto& [k, v] : taps) s.insert(k.level);
  return {s.begin(), s.end()};
}

namespace {

template <typename T>
void add_conv(ParamStore<T>& p, const std::string& name, int cout, int cin, int k, Rng& rng, double gain = 1.0) {
  p.add(name + ".weight", init_fan_in<T>({cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng, gain));
  p.add(name + ".bias", Tensor<T>({cout}));
}

template <typename T>
void add_norm(ParamStore<T>& p, const std::string& name, int c) {
  p.add(name + ".weight", Tensor<T>({c}, T(1)));
  p.add(name + ".bias", Tensor<T>({c}));
}

template <typename T>
void add_resblock(ParamStore<T>& p, const std::string& name, int cin, int cout, int tdim, Rng& rng) {
  add_norm(p, name + ".norm1", cin);
  add_conv(p, name + ".conv1", cout, cin, 3, rng);
  p.add(name + ".temb.weight", init_fan_in<T>({cout, tdim}, tdim, rng));
  p.add(name + ".temb.bias", Tensor<T>({cout}));
  add_norm(p, name + ".norm2", cout);
  add_conv(p, name + ".conv2", cout, cout, 3, rng);
  if (cin != cout) add_conv(p, name + ".skip", cout, cin, 1, rng);
}

template <typename T>
void add_attention(ParamStore<T>& p, const std::string& name, int c, int text_dim, Rng& rng) {
  add_norm(p, name + ".norm", c);
  p.add(name + ".q.weight", init_fan_in<T>({c, c}, c, rng));
  p.add(name + ".k.weight", init_fan_in<T>({c, text_dim}, text_dim, rng));
  p.add(name + ".v.weight", init_fan_in<T>({c, text_dim}, text_dim, rng));
  p.add(name + ".out.weight", init_fan_in<T>({c, c}, c, rng));
  p.add(name + ".out.bias", Tensor<T>({c}));
}

template <typename T>
struct Net {
  const ParamStore<T>& p;
  const BackboneConfig& cfg;

  const Var<T>& w(const std::string& name) const { return p.get(name); }

  Var<T> norm(const Var<T>& x, const std::string& name) const {
    return ops::group_norm(x, w(name + ".weight"), w(name + ".bias"), group_count(static_cast<int>(x.dim(0)), cfg.max_groups),
                           T(1e-5));
  }

  Var<T> conv(const Var<T>& x, const std::string& name, int stride = 1) const {
    const auto& k = w(name + ".weight");
    return ops::conv2d(x, k, w(name + ".bias"), stride, static_cast<int>(k.dim(2) / 2));
  }

  Var<T> resblock(const Var<T>& x, const Var<T>& temb_act, const std::string& name) const {
    auto h = conv(ops::silu(norm(x, name + ".norm1")), name + ".conv1");
    auto tproj = ops::linear(temb_act, w(name + ".temb.weight"), w(name + ".temb.bias"));
    h = ops::add_channel(h, ops::reshape(tproj, {h.dim(0)}));
    h = conv(ops::silu(norm(h, name + ".norm2")), name + ".conv2");
    const auto skip = p.contains(name + ".skip.weight") ? conv(x, name + ".skip") : x;
    return ops::add(skip, h);
  }

  // Returns the residual output and, when requested, the (1, H, W) map.
  std::pair<Var<T>, Var<T>> attention(const Var<T>& x, const Var<T>& context, const std::string& name,
                                      bool want_map) const {
    const auto c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const auto heads = cfg.heads;
    const auto dh = c / heads;
    auto tokens = ops::to_tokens(norm(x, name + ".norm"));
    auto q = ops::linear(tokens, w(name + ".q.weight"), Var<T>());
    auto k = ops::linear(context, w(name + ".k.weight"), Var<T>());
    auto v = ops::linear(context, w(name + ".v.weight"), Var<T>());
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    std::vector<Var<T>> probs;
    for (int hh = 0; hh < heads; ++hh) {
      auto qh = ops::slice(q, 1, hh * dh, dh);
      auto kh = ops::slice(k, 1, hh * dh, dh);
      auto vh = ops::slice(v, 1, hh * dh, dh);
      auto pr = ops::softmax_rows(ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt));
      outs.push_back(ops::matmul(pr, vh));
      if (want_map) probs.push_back(pr);
    }
    auto attn_out = ops::linear(ops::concat(outs, 1), w(name + ".out.weight"), w(name + ".out.bias"));
    auto y = ops::add(x, ops::from_tokens(attn_out, h, wd));
    Var<T> map;
    if (want_map) {
      auto mean_heads = ops::scale(ops::sum_of(probs), T(1) / static_cast<T>(heads));
      const auto& pv = mean_heads.value();
      for (std::int64_t r = 0; r < pv.dim(0); ++r) {
        T s = 0;
        for (std::int64_t j = 0; j < pv.dim(1); ++j) s += pv[r * pv.dim(1) + j];
        if (std::abs(s - T(1)) > T(1e-3)) throw std::logic_error("attention row does not sum to one");
      }
      const auto n_keys = mean_heads.dim(1);
      const std::int64_t first = cfg.attn_include_start_token ? 0 : 1;
      if (n_keys - first <= 0) {
        map = Var<T>(Tensor<T>({1, h, wd}));
      } else {
        auto sel = first == 0 ? mean_heads : ops::slice(mean_heads, 1, first, n_keys - first);
        map = ops::reshape(ops::mean_axis(sel, 1), {1, h, wd});
      }
    }
    return {y, map};
  }
};

}  // namespace

template <typename T>
void init_backbone(ParamStore<T>& params, const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  const int tdim = cfg.time_dim();
  const int levels = cfg.levels();
  params.add("unet.time.fc1.weight", init_fan_in<T>({tdim, tdim}, tdim, rng));
  params.add("unet.time.fc1.bias", Tensor<T>({tdim}));
  params.add("unet.time.fc2.weight", init_fan_in<T>({tdim, tdim}, tdim, rng));
  params.add("unet.time.fc2.bias", Tensor<T>({tdim}));
  params.add("unet.context_start", init_uniform<T>({1, cfg.text_dim}, T(1), rng));
  add_conv(params, "unet.conv_in", cfg.channels(0), cfg.latent_channels, 3, rng);
  int prev = cfg.channels(0);
  for (int l = 0; l < levels; ++l) {
    const std::string name = "unet.down" + std::to_string(l);
    add_resblock(params, name + ".res", prev, cfg.channels(l), tdim, rng);
    add_attention(params, name + ".attn", cfg.channels(l), cfg.text_dim, rng);
    prev = cfg.channels(l);
    if (l + 1 < levels) add_conv(params, name + ".downsample", prev, prev, 3, rng);
  }
  add_resblock(params, "unet.mid.res", prev, prev, tdim, rng);
  add_attention(params, "unet.mid.attn", prev, cfg.text_dim, rng);
  for (int l = levels - 1; l >= 0; --l) {
    const std::string name = "unet.up" + std::to_string(l);
    add_resblock(params, name + ".res", prev + cfg.channels(l), cfg.channels(l), tdim, rng);
    add_attention(params, name + ".attn", cfg.channels(l), cfg.text_dim, rng);
    prev = cfg.channels(l);
  }
  add_norm(params, "unet.norm_out", prev);
  add_conv(params, "unet.conv_out", cfg.latent_channels, prev, 3, rng);
}

template <typename T>
Tensor<T> encoder_kernel(const BackboneConfig& cfg) {
  const int p = cfg.patch();
  const int c_in = cfg.image_channels;
  Tensor<T> k({cfg.latent_channels, c_in, p, p});
  const double area = static_cast<double>(p) * p;
  const double gain = 8.0;
  auto set = [&](int out, int ch, int y, int x, double v) {
    if (out < cfg.latent_channels && ch < c_in) k[((static_cast<std::int64_t>(out) * c_in + ch) * p + y) * p + x] = static_cast<T>(gain * v);
  };
  for (int y = 0; y < p; ++y) {
    for (int x = 0; x < p; ++x) {
      // Luminance, red-green and blue-yellow opponents, then a structure channel.
      for (int ch = 0; ch < c_in; ++ch) set(0, ch, y, x, 1.0 / (c_in * area));
      set(1, 0, y, x, 1.0 / area);
      set(1, 1, y, x, -1.0 / area);
      set(2, 2, y, x, 1.0 / area);
      set(2, 0, y, x, -0.5 / area);
      set(2, 1, y, x, -0.5 / area);
      const double sx = (2 * x < p) ? 1.0 : -1.0;
      const double sy = (2 * y < p) ? 1.0 : -1.0;
      for (int ch = 0; ch < c_in; ++ch) set(3, ch, y, x, (sx + sy) / (c_in * area));
    }
  }
  // Any extra latent channels get deterministic pseudo-random patch filters.
  Rng rng(0x5EEDull);
  for (int out = 4; out < cfg.latent_channels; ++out)
    for (int ch = 0; ch < c_in; ++ch)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x) set(out, ch, y, x, rng.uniform(-1.0, 1.0) / area);
  return k;
}

template <typename T>
Tensor<T> encode_image(const Tensor<T>& img, const BackboneConfig& cfg) {
  if (img.rank() != 3 || img.dim(0) != cfg.image_channels || img.dim(1) != cfg.image_size ||
      img.dim(2) != cfg.image_size) {
    throw std::invalid_argument("encode_image expects (" + std::to_string(cfg.image_channels) + ", " +
                                std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) + "), got " +
                                shape_str(img.shape()));
  }
  Var<T> x(img);
  Var<T> k(encoder_kernel<T>(cfg));
  auto z = ops::conv2d(x, k, Var<T>(), cfg.patch(), 0);
  return ops::scale(z, static_cast<T>(cfg.input_scale)).value();
}

template <typename T>
std::vector<T> timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  std::vector<T> out(static_cast<std::size_t>(dim), T(0));
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    out[static_cast<std::size_t>(j)] = static_cast<T>(std::sin(t * freq));
    out[static_cast<std::size_t>(j + half)] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

template <typename T>
UNetOutput<T> unet_forward(const Var<T>& z_t, int t, const Var<T>& cond, const ParamStore<T>& params,
                           const BackboneConfig& cfg, bool want_attn) {
  if (z_t.shape() != Shape{cfg.latent_channels, cfg.latent_size, cfg.latent_size}) {
    throw std::invalid_argument("unet_forward: latent shape " + shape_str(z_t.shape()) + " does not match config");
  }
  if (t < 0 || t > cfg.max_time_step) throw std::out_of_range("unet_forward: time step out of range");
  Var<T> context = params.get("unet.context_start");
  if (cond.defined() && cond.value().numel() > 0) {
    if (cond.shape().size() != 2 || cond.dim(1) != cfg.text_dim) {
      throw std::invalid_argument("unet_forward: condition vectors must have dimension " +
                                  std::to_string(cfg.text_dim));
    }
    context = ops::concat<T>({context, cond}, 0);
  } else if (cond.defined() && cond.shape().size() == 2 && cond.dim(1) != cfg.text_dim) {
    throw std::invalid_argument("unet_forward: condition vectors must have dimension " + std::to_string(cfg.text_dim));
  }

  Net<T> net{params, cfg};
  const int tdim = cfg.time_dim();
  Var<T> temb(Tensor<T>({1, tdim}, timestep_embedding<T>(t, tdim)));
  temb = ops::linear(temb, params.get("unet.time.fc1.weight"), params.get("unet.time.fc1.bias"));
  temb = ops::linear(ops::silu(temb), params.get("unet.time.fc2.weight"), params.get("unet.time.fc2.bias"));
  const auto temb_act = ops::silu(temb);

  UNetOutput<T> out;
  auto record = [&](Stage s, int level, const Var<T>& feat, const Var<T>& map) {
    out.bundle.taps[{s, level}] = feat;
    if (want_attn) out.bundle.attn[{s, level}] = map;
  };

  const int levels = cfg.levels();
  auto h = net.conv(z_t, "unet.conv_in");
  std::vector<Var<T>> skips;
  for (int l = 0; l < levels; ++l) {
    const std::string name = "unet.down" + std::to_string(l);
    h = net.resblock(h, temb_act, name + ".res");
    auto [y, map] = net.attention(h, context, name + ".attn", want_attn);
    h = y;
    record(Stage::kDown, l, h, map);
    skips.push_back(h);
    if (l + 1 < levels) h = net.conv(h, name + ".downsample", 2);
  }
  h = net.resblock(h, temb_act, "unet.mid.res");
  {
    auto [y, map] = net.attention(h, context, "unet.mid.attn", want_attn);
    h = y;
    record(Stage::kMid, levels - 1, h, map);
  }
  for (int l = levels - 1; l >= 0; --l) {
    const std::string name = "unet.up" + std::to_string(l);
    h = ops::concat<T>({h, skips[static_cast<std::size_t>(l)]}, 0);
    h = net.resblock(h, temb_act, name + ".res");
    auto [y, map] = net.attention(h, context, name + ".attn", want_attn);
    h = y;
    record(Stage::kUp, l, h, map);
    if (l > 0) h = ops::upsample_nearest2(h);
  }
  out.eps = net.conv(ops::silu(net.norm(h, "unet.norm_out")), "unet.conv_out");
  out.bundle.meta.t = t;
  return out;
}

template <typename T>
Tensor<T> cfg_eps(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s) {
  require_same_shape(eps_cond, eps_uncond, "cfg_eps");
  if (s == 1.0) return eps_cond;
  if (s == 0.0) return eps_uncond;
  const T scale = static_cast<T>(s);
  Tensor<T> out(eps_cond.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
  return out;
}

template <typename T>
Var<T> cfg_blend(const Var<T>& cond, const Var<T>& uncond, double s) {
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  return ops::add(uncond, ops::scale(ops::sub(cond, uncond), static_cast<T>(s)));
}

template <typename T>
FeatureBundle<T> extract_features(const Tensor<T>& img, const PromptCondition<T>& prompt, const ExtractOptions& opts,
                                  const ParamStore<T>& params, const BackboneConfig& cfg, const ScheduleTable& table) {
  if (opts.stages.empty()) throw std::invalid_argument("extract_features: empty stage set");
  const Tensor<T> z0 = encode_image(img, cfg);
  Tensor<T> z = z0;
  const auto null_seq = params.get("text.null_embedding");
  switch (opts.noise_mode) {
    case NoiseMode::kNone: break;
    case NoiseMode::kDdpm: {
      if (opts.t > 0) {
        Rng rng(opts.noise_seed);
        z = ddpm_noise(z0, opts.t, table, rng).z_t;
      }
      break;
    }
    case NoiseMode::kDdimInversion: {
      const Var<T> eps_cond = opts.ddim_conditional ? prompt.seq.detach() : null_seq.detach();
      EpsFn<T> eps_fn = [&](const Tensor<T>& zk, int tk) {
        return unet_forward(Var<T>(zk), tk, eps_cond, params, cfg, false).eps.value();
      };
      z = ddim_invert(z0, opts.t, eps_fn, table, opts.ddim_steps).z_t;
      break;
    }
  }
  const Var<T> zv(z);
  auto cond = unet_forward(zv, opts.t, prompt.seq, params, cfg, opts.want_attn);
  FeatureBundle<T> bundle;
  if (opts.cfg_scale != 1.0) {
    auto uncond = unet_forward(zv, opts.t, null_seq, params, cfg, false);
    for (auto& [k, v] : cond.bundle.taps) {
      if (opts.stages.count(k.stage)) bundle.taps[k] = cfg_blend(v, uncond.bundle.taps.at(k), opts.cfg_scale);
    }
  } else {
    for (auto& [k, v] : cond.bundle.taps) {
      if (opts.stages.count(k.stage)) bundle.taps[k] = v;
    }
  }
  bundle.attn = std::move(cond.bundle.attn);
  bundle.meta.t = opts.t;
  bundle.meta.noise_mode = opts.noise_mode;
  bundle.meta.prompt_mode = prompt.mode;
  bundle.meta.cfg_scale = opts.cfg_scale;
  return bundle;
}

template <typename T>
PretrainResult pretrain_backbone(const std::vector<CaptionedImage>& data, ParamStore<T>& params,
                                 const BackboneConfig& cfg, const ScheduleTable& table, const PretrainConfig& train) {
  if (data.empty()) throw std::invalid_argument("pretrain_backbone: empty dataset");
  params.set_trainable([&](const std::string& n) {
    return n.rfind("unet.", 0) == 0 || (train.train_text && n.rfind("text.", 0) == 0);
  });
  std::vector<Tensor<T>> latents;
  std::vector<std::vector<int>> tokens;
  for (const auto& d : data) {
    latents.push_back(encode_image(d.image.template cast<T>(), cfg));
    tokens.push_back(tokenize(d.caption));
  }
  AdamW<T> opt({train.lr, 0.9, 0.999, 1e-8, 0.0, 1.0});
  Rng rng(derive_seed(train.seed, 0xD1FFu));
  PretrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto null_row = params.get("text.null_embedding");
  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    double epoch_loss = 0.0;
    std::size_t in_batch = 0;
    params.zero_grad();
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const auto idx = order[pos];
      const int t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(table.steps)));
      Tensor<T> eps(latents[idx].shape());
      for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = static_cast<T>(rng.normal());
      const auto z_t = q_sample(latents[idx], t, eps, table);
      Var<T> cond;
      if (rng.bernoulli(train.cond_dropout) || tokens[idx].empty()) {
        cond = null_row;
        ++result.null_condition_steps;
      } else {
        cond = encode_text(tokens[idx], params, false).seq;
      }
      auto pred = unet_forward(Var<T>(z_t), t, cond, params, cfg, false).eps;
      auto loss = ops::mse(pred, Var<T>(eps));
      loss.backward();
      epoch_loss += static_cast<double>(loss.value()[0]);
      ++result.total_steps;
      if (++in_batch == static_cast<std::size_t>(train.batch_size) || pos + 1 == order.size()) {
        opt.step(params, 1.0 / static_cast<double>(in_batch));
        params.zero_grad();
        in_batch = 0;
      }
    }
    result.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  params.set_trainable([](const std::string&) { return false; });
  return result;
}

#define VERMOUTH_INSTANTIATE(T)                                                                                     \
  template struct FeatureBundle<T>;                                                                                 \
  template void init_backbone<T>(ParamStore<T>&, const BackboneConfig&, Rng&);                                      \
  template Tensor<T> encoder_kernel<T>(const BackboneConfig&);                                                      \
  template Tensor<T> encode_image<T>(const Tensor<T>&, const BackboneConfig&);                                      \
  template std::vector<T> timestep_embedding<T>(int, int);                                                          \
  template UNetOutput<T> unet_forward<T>(const Var<T>&, int, const Var<T>&, const ParamStore<T>&,                   \
                                         const BackboneConfig&, bool);                                              \
  template Tensor<T> cfg_eps<T>(const Tensor<T>&, const Tensor<T>&, double);                                        \
  template Var<T> cfg_blend<T>(const Var<T>&, const Var<T>&, double);                                               \
  template FeatureBundle<T> extract_features<T>(const Tensor<T>&, const PromptCondition<T>&, const ExtractOptions&, \
                                                const ParamStore<T>&, const BackboneConfig&, const ScheduleTable&); \
  template PretrainResult pretrain_backbone<T>(const std::vector<CaptionedImage>&, ParamStore<T>&,                  \
                                               const BackboneConfig&, const ScheduleTable&, const PretrainConfig&);
VERMOUTH_INSTANTIATE(float)
VERMOUTH_INSTANTIATE(double)
#undef VERMOUTH_INSTANTIATE

}  // namespace vermouth
