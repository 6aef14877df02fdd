#include "fambav/vim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "fambav/errors.hpp"
#include "fambav/ops.hpp"

namespace fambav {

SsmConfig VimConfig::ssm() const {
  SsmConfig s;
  s.dim = dim;
  s.inner = inner;
  s.state = state;
  s.conv_kernel = conv_kernel;
  s.dt_rank = dt_rank;
  s.skip = ssm_skip;
  s.zero_out_proj = zero_out_proj;
  return s;
}

void VimConfig::validate() const {
  if (patch == 0 || image_h == 0 || image_w == 0 || channels == 0) {
    throw ConfigError("model: image, channels and patch must be >= 1");
  }
  if (image_h % patch != 0 || image_w % patch != 0) {
    throw ConfigError("model: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                      " not divisible by patch " + std::to_string(patch));
  }
  if (dim == 0 || inner == 0 || state == 0 || layers == 0 || conv_kernel == 0) {
    throw ConfigError("model: dim, inner, state, layers and conv_kernel must be >= 1");
  }
  if (n_classes < 2) throw ConfigError("model: n_classes must be >= 2");
}

namespace {

struct ConfigField {
  const char* key;
  std::function<std::string(const VimConfig&)> get;
  std::function<void(VimConfig&, const std::string&)> set;
};

template <typename M>
ConfigField size_field(const char* key, M VimConfig::*member) {
  return {key, [member](const VimConfig& c) { return std::to_string(c.*member); },
          [member, key](VimConfig& c, const std::string& v) {
            try {
              c.*member = static_cast<M>(std::stoull(v));
            } catch (const std::exception&) {
              throw ConfigError(std::string("model record: bad value for ") + key + ": '" + v + "'");
            }
          }};
}

ConfigField bool_field(const char* key, bool VimConfig::*member) {
  return {key, [member](const VimConfig& c) { return std::string(c.*member ? "1" : "0"); },
          [member](VimConfig& c, const std::string& v) { c.*member = v == "1" || v == "true"; }};
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      size_field("image_h", &VimConfig::image_h),         size_field("image_w", &VimConfig::image_w),
      size_field("channels", &VimConfig::channels),       size_field("patch", &VimConfig::patch),
      size_field("dim", &VimConfig::dim),                 size_field("inner", &VimConfig::inner),
      size_field("state", &VimConfig::state),             size_field("layers", &VimConfig::layers),
      size_field("n_classes", &VimConfig::n_classes),     size_field("conv_kernel", &VimConfig::conv_kernel),
      size_field("dt_rank", &VimConfig::dt_rank),         size_field("head_hidden", &VimConfig::head_hidden),
      bool_field("ssm_skip", &VimConfig::ssm_skip),       bool_field("fusion_weighted", &VimConfig::fusion_weighted),
      bool_field("zero_out_proj", &VimConfig::zero_out_proj), size_field("init_seed", &VimConfig::init_seed),
  };
  return fields;
}

}  // namespace

std::string VimConfig::to_record() const {
  std::ostringstream os;
  for (const auto& f : config_fields()) os << f.key << '=' << f.get(*this) << '\n';
  return os.str();
}

VimConfig VimConfig::from_record(const std::string& record) {
  VimConfig cfg;
  std::istringstream is(record);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model record: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    bool known = false;
    for (const auto& f : config_fields()) {
      if (key == f.key) {
        f.set(cfg, line.substr(eq + 1));
        known = true;
      }
    }
    if (!known) throw ConfigError("model record: unknown key '" + key + "'");
  }
  return cfg;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  if (images.dim() != 4) throw DimensionError("patchify: expected [B, C, H, W], got " + shape_str(images.shape()));
  const std::size_t B = images.size(0), C = images.size(1), H = images.size(2), W = images.size(3);
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ConfigError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch " +
                      std::to_string(patch));
  }
  const std::size_t gh = H / patch, gw = W / patch, width = patch * patch * C;
  Tensor<T> out = Tensor<T>::zeros({B, gh * gw, width});
  const T* src = images.data().data();
  T* dst = out.mutable_data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        T* row = dst + (b * gh * gw + py * gw + px) * width;
        for (std::size_t y = 0; y < patch; ++y) {
          for (std::size_t x = 0; x < patch; ++x) {
            for (std::size_t c = 0; c < C; ++c) {
              row[(y * patch + x) * C + c] = src[((b * C + c) * H + py * patch + y) * W + px * patch + x];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
VimModel<T>::VimModel(const VimConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(cfg_.init_seed, 0x5EED));
  const std::size_t width = cfg_.patch * cfg_.patch * cfg_.channels;
  patch_proj = uniform_param<T>({width, cfg_.dim}, 1.0 / std::sqrt(double(width)), rng);
  pos_embed = normal_param<T>({cfg_.seq_len(), cfg_.dim}, 0.02, rng);
  cls_token = normal_param<T>({cfg_.dim}, 0.02, rng);
  const SsmConfig ssm = cfg_.ssm();
  for (std::size_t l = 0; l < cfg_.layers; ++l) layers.push_back(MambaBlock<T>::init(ssm, rng));
  head_norm_gain = constant_param<T>({cfg_.dim}, T(1));
  head_norm_bias = constant_param<T>({cfg_.dim}, T(0));
  std::size_t head_in = cfg_.dim;
  if (cfg_.head_hidden > 0) {
    head_hidden_w = uniform_param<T>({cfg_.dim, cfg_.head_hidden}, 1.0 / std::sqrt(double(cfg_.dim)), rng);
    head_hidden_b = constant_param<T>({cfg_.head_hidden}, T(0));
    head_in = cfg_.head_hidden;
  }
  head_w = normal_param<T>({head_in, cfg_.n_classes}, 0.02, rng);
  head_b = constant_param<T>({cfg_.n_classes}, T(0));
}

template <typename T>
TokenSequence<T> VimModel<T>::embed(const Tensor<T>& patches) const {
  const std::size_t width = cfg_.patch * cfg_.patch * cfg_.channels;
  if (patches.dim() != 3 || patches.size(1) != cfg_.n_patches() || patches.size(2) != width) {
    throw DimensionError("embed: expected [B, " + std::to_string(cfg_.n_patches()) + ", " + std::to_string(width) +
                         "], got " + shape_str(patches.shape()));
  }
  const std::size_t B = patches.size(0);
  const Tensor<T> projected = matmul(patches, patch_proj);
  const Tensor<T> cls = add(Tensor<T>::zeros({B, 1, cfg_.dim}), reshape(cls_token, {1, 1, cfg_.dim}));
  TokenSequence<T> seq;
  seq.values = add(concat<T>({cls, projected}, 1), pos_embed);
  return seq;
}

template <typename T>
ForwardResult<T> VimModel<T>::forward(const Tensor<T>& images, const FusionPlan& plan, FusionTrace* trace) const {
  if (plan.layers() != cfg_.layers || plan.seq_len != cfg_.seq_len()) {
    throw PlanError("plan for " + std::to_string(plan.layers()) + " layers / seq " + std::to_string(plan.seq_len) +
                    " does not fit model with " + std::to_string(cfg_.layers) + " layers / seq " +
                    std::to_string(cfg_.seq_len()));
  }
  validate_plan(plan);
  if (images.dim() != 4 || images.size(1) != cfg_.channels || images.size(2) != cfg_.image_h ||
      images.size(3) != cfg_.image_w) {
    throw DimensionError("forward: images " + shape_str(images.shape()) + " do not match model input");
  }
  ForwardResult<T> result;
  TokenSequence<T> seq = embed(patchify(images, cfg_.patch));
  const FusionOptions opts{cfg_.fusion_weighted};
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    seq = fuse_layer(seq, plan.r[l], opts, trace, l + 1);
    result.lengths.push_back(seq.length());
    seq.values = add(layers[l].forward(seq.values), seq.values);
  }
  const std::size_t B = images.size(0);
  Tensor<T> feat = layernorm(reshape(slice(seq.values, 1, 0, 1), {B, cfg_.dim}), head_norm_gain, head_norm_bias);
  if (cfg_.head_hidden > 0) feat = silu(add(matmul(feat, head_hidden_w), head_hidden_b));
  result.logits = add(matmul(feat, head_w), head_b);
  return result;
}

template <typename T>
ParameterList<T> VimModel<T>::parameters() const {
  ParameterList<T> out;
  out.push_back({"embed.patch_proj", patch_proj, true});
  out.push_back({"embed.pos_embed", pos_embed, false});
  out.push_back({"embed.cls_token", cls_token, false});
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(out, "layers." + std::to_string(l) + ".");
  out.push_back({"head.norm.gain", head_norm_gain, false});
  out.push_back({"head.norm.bias", head_norm_bias, false});
  if (cfg_.head_hidden > 0) {
    out.push_back({"head.hidden.w", head_hidden_w, true});
    out.push_back({"head.hidden.b", head_hidden_b, false});
  }
  out.push_back({"head.w", head_w, true});
  out.push_back({"head.b", head_b, false});
  return out;
}

template <typename T>
Tensor<T> classify_loss(const Tensor<T>& logits, const std::vector<std::size_t>& targets, double smoothing) {
  if (logits.dim() != 2 || logits.size(0) != targets.size()) {
    throw DimensionError("classify_loss: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ContractError("classify_loss: smoothing must be in [0, 1)");
  const std::size_t B = logits.size(0), n = logits.size(1);
  Tensor<T> q = Tensor<T>::full({B, n}, static_cast<T>(smoothing / double(n)));
  auto qd = q.mutable_data();
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b] >= n) {
      throw IndexError("classify_loss: target " + std::to_string(targets[b]) + " out of range for " +
                       std::to_string(n) + " classes");
    }
    qd[b * n + targets[b]] += static_cast<T>(1.0 - smoothing);
  }
  return neg(mean(sum(mul(q, log_softmax_lastaxis(logits)), -1)));
}

namespace {

constexpr char kMagic[8] = {'F', 'A', 'M', 'B', 'A', 'V', '1', '\0'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

struct Reader {
  std::istream& is;
  std::string path;

  void need(bool ok, const char* what) const {
    if (!ok) throw FormatError("checkpoint " + path + ": truncated while reading " + what);
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    need(static_cast<bool>(is.read(reinterpret_cast<char*>(b), 4)), what);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  }
  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    return lo | std::uint64_t(u32(what)) << 32;
  }
  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    need(static_cast<bool>(is.read(s.data(), static_cast<std::streamsize>(n))), what);
    return s;
  }
};

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const VimModel<T>& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, sizeof kMagic);
  put_u32(os, kFormatVersion);
  const std::string record = model.config().to_record();
  put_u32(os, static_cast<std::uint32_t>(record.size()));
  os.write(record.data(), static_cast<std::streamsize>(record.size()));
  const ParameterList<T> params = model.parameters();
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& s = p.tensor.shape();
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    for (std::size_t e : s) put_u64(os, e);
    for (T v : p.tensor.data()) put_f32(os, static_cast<float>(v));
  }
  if (!os) throw ConfigError("checkpoint: write to " + path + " failed");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  Reader rd{is, path};
  const std::string magic = rd.bytes(sizeof kMagic, "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) throw FormatError("checkpoint " + path + ": bad magic");
  const std::uint32_t version = rd.u32("version");
  if (version != kFormatVersion) {
    throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config_record = rd.bytes(rd.u32("config length"), "config record");
  const std::uint32_t count = rd.u32("blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointBlob blob;
    blob.name = rd.bytes(rd.u32("name length"), "name");
    const std::uint32_t rank = rd.u32("rank");
    for (std::uint32_t k = 0; k < rank; ++k) blob.shape.push_back(rd.u64("extent"));
    blob.values.resize(shape_numel(blob.shape));
    for (float& v : blob.values) {
      const std::uint32_t bits = rd.u32("values");
      std::memcpy(&v, &bits, 4);
    }
    ck.blobs.push_back(std::move(blob));
  }
  return ck;
}

template <typename T>
VimModel<T> load_model(const std::string& path) {
  const Checkpoint ck = read_checkpoint(path);
  VimModel<T> model(VimConfig::from_record(ck.config_record));
  ParameterList<T> params = model.parameters();
  if (params.size() != ck.blobs.size()) {
    throw FormatError("checkpoint " + path + ": " + std::to_string(ck.blobs.size()) + " blobs, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const CheckpointBlob& blob = ck.blobs[i];
    if (blob.name != params[i].name || blob.shape != params[i].tensor.shape()) {
      throw FormatError("checkpoint " + path + ": blob '" + blob.name + "' " + shape_str(blob.shape) +
                        " does not match parameter '" + params[i].name + "'");
    }
    auto dst = params[i].tensor.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(blob.values[k]);
  }
  return model;
}

#define FAMBAV_INSTANTIATE(T)                                                                   \
  template Tensor<T> patchify<T>(const Tensor<T>&, std::size_t);                                \
  template class VimModel<T>;                                                                   \
  template Tensor<T> classify_loss<T>(const Tensor<T>&, const std::vector<std::size_t>&, double); \
  template void save_checkpoint<T>(const std::string&, const VimModel<T>&);                     \
  template VimModel<T> load_model<T>(const std::string&);

FAMBAV_INSTANTIATE(float)
FAMBAV_INSTANTIATE(double)

#undef FAMBAV_INSTANTIATE

}  // namespace fambav
