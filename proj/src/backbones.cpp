#include "tumorseg/backbones.hpp"

#include "tumorseg/error.hpp"

namespace tumorseg {

namespace {

void require_depth(int depth, int max_depth, const char* name) {
  if (depth < 1 || depth > max_depth) {
    throw Error(ErrorCode::kInvalidConfig,
                std::string(name) + " supports depth 1.." + std::to_string(max_depth) + ", got " + std::to_string(depth));
  }
}

ConvOptions conv(Index in, Index out, int kernel, int stride = 1) {
  return {.in = in, .out = out, .kernel = kernel, .stride = stride, .dilation = 1, .bias = true};
}

// --- Plain -----------------------------------------------------------------

template <typename Scalar>
class PlainEncoder : public Encoder<Scalar> {
 public:
  PlainEncoder(BlockKind kind, int depth, Index base, const BlockConfig& block, Initializer& init)
      : pooled_(kind != BlockKind::kResidual) {
    if (depth < 1) throw Error(ErrorCode::kInvalidConfig, "depth must be >= 1");
    Index in = block.in_channels;
    for (int level = 0; level <= depth; ++level) {
      BlockConfig cfg = block;
      cfg.in_channels = in;
      cfg.out_channels = base << level;
      cfg.stride = (!pooled_ && level > 0) ? 2 : 1;
      levels_.push_back(make_block<Scalar>(kind, cfg, init));
      in = cfg.out_channels;
    }
  }

  EncoderFeatures<Scalar> forward(const Var<Scalar>& x, Phase phase) override {
    EncoderFeatures<Scalar> f;
    Var<Scalar> h = x;
    for (std::size_t level = 0; level < levels_.size(); ++level) {
      if (pooled_ && level > 0) h = max_pool(h, 2, 2);
      h = levels_[level]->forward(h, phase);
      if (level + 1 < levels_.size()) f.skips.push_back(h);
    }
    f.bottom = h;
    return f;
  }

  std::vector<Index> skip_channels() const override {
    std::vector<Index> c;
    for (std::size_t i = 0; i + 1 < levels_.size(); ++i) c.push_back(levels_[i]->out_channels());
    return c;
  }
  Index bottom_channels() const override { return levels_.back()->out_channels(); }
  Index input_channels() const override { return levels_.front()->in_channels(); }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      const bool bottom = i + 1 == levels_.size();
      levels_[i]->visit(v, join_name(prefix, bottom ? "bridge" : "level" + std::to_string(i)));
    }
  }

 private:
  bool pooled_;
  std::vector<std::unique_ptr<Block<Scalar>>> levels_;
};

// --- VGG-19 ----------------------------------------------------------------

template <typename Scalar>
class Vgg19Encoder : public Encoder<Scalar> {
 public:
  Vgg19Encoder(int depth, Index base, bool bn, Initializer& init) {
    require_depth(depth, 4, "vgg19 encoder");
    static constexpr int kConvs[] = {2, 2, 4, 4, 4};
    static constexpr int kWidth[] = {1, 2, 4, 8, 8};
    Index in = 3;
    for (int s = 0; s <= depth; ++s) {
      std::vector<ConvBnAct<Scalar>> stage;
      for (int i = 0; i < kConvs[s]; ++i) {
        stage.emplace_back(conv(in, base * kWidth[s], 3), bn, true, init);
        in = base * kWidth[s];
      }
      stages_.push_back(std::move(stage));
      widths_.push_back(in);
    }
  }

  EncoderFeatures<Scalar> forward(const Var<Scalar>& x, Phase phase) override {
    EncoderFeatures<Scalar> f;
    Var<Scalar> h = x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s > 0) h = max_pool(h, 2, 2);
      for (auto& c : stages_[s]) h = c.forward(h, phase);
      if (s + 1 < stages_.size()) f.skips.push_back(h);
    }
    f.bottom = h;
    return f;
  }

  std::vector<Index> skip_channels() const override { return {widths_.begin(), widths_.end() - 1}; }
  Index bottom_channels() const override { return widths_.back(); }
  Index input_channels() const override { return 3; }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t i = 0; i < stages_[s].size(); ++i) {
        stages_[s][i].visit(v, join_name(prefix, "block" + std::to_string(s + 1) + "_conv" + std::to_string(i + 1)));
      }
    }
  }

 private:
  std::vector<std::vector<ConvBnAct<Scalar>>> stages_;
  std::vector<Index> widths_;
};

// --- ResNet-152 ------------------------------------------------------------

template <typename Scalar>
class Bottleneck : public Module<Scalar> {
 public:
  Bottleneck(Index in, Index width, int stride, Initializer& init)
      : reduce(conv(in, width, 1), true, true, init),
        spatial(conv(width, width, 3, stride), true, true, init),
        expand(conv(width, width * 4, 1), true, false, init),
        project_(in != width * 4 || stride != 1) {
    if (project_) shortcut = ConvBnAct<Scalar>(conv(in, width * 4, 1, stride), true, false, init);
  }

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) {
    Var<Scalar> h = expand.forward(spatial.forward(reduce.forward(x, phase), phase), phase);
    return relu(add(h, project_ ? shortcut.forward(x, phase) : x));
  }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    reduce.visit(v, join_name(prefix, "conv1"));
    spatial.visit(v, join_name(prefix, "conv2"));
    expand.visit(v, join_name(prefix, "conv3"));
    if (project_) shortcut.visit(v, join_name(prefix, "shortcut"));
  }

  ConvBnAct<Scalar> reduce, spatial, expand, shortcut;

 private:
  bool project_;
};

template <typename Scalar>
class ResNet152Encoder : public Encoder<Scalar> {
 public:
  ResNet152Encoder(int depth, Index base, Initializer& init) : depth_(depth) {
    require_depth(depth, 5, "resnet152 encoder");
    static constexpr int kBlocks[] = {3, 8, 36, 3};
    stem_ = ConvBnAct<Scalar>(conv(3, base, 7, 2), true, true, init);
    widths_ = {3, base};
    Index in = base;
    for (int s = 0; s + 2 <= depth; ++s) {
      const Index width = base << s;
      std::vector<Bottleneck<Scalar>> stage;
      for (int b = 0; b < kBlocks[s]; ++b) {
        stage.emplace_back(in, width, (b == 0 && s > 0) ? 2 : 1, init);
        in = width * 4;
      }
      stages_.push_back(std::move(stage));
      widths_.push_back(in);
    }
  }

  EncoderFeatures<Scalar> forward(const Var<Scalar>& x, Phase phase) override {
    std::vector<Var<Scalar>> levels{x};
    Var<Scalar> h = stem_.forward(x, phase);
    levels.push_back(h);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      if (s == 0) h = max_pool(h, 3, 2, 1);
      for (auto& b : stages_[s]) h = b.forward(h, phase);
      levels.push_back(h);
    }
    EncoderFeatures<Scalar> f;
    f.skips.assign(levels.begin(), levels.begin() + depth_);
    f.bottom = levels[static_cast<std::size_t>(depth_)];
    return f;
  }

  std::vector<Index> skip_channels() const override { return {widths_.begin(), widths_.begin() + depth_}; }
  Index bottom_channels() const override { return widths_[static_cast<std::size_t>(depth_)]; }
  Index input_channels() const override { return 3; }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    stem_.visit(v, join_name(prefix, "stem"));
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].visit(v, join_name(prefix, "stage" + std::to_string(s + 1) + "_block" + std::to_string(b + 1)));
      }
    }
  }

 private:
  int depth_;
  ConvBnAct<Scalar> stem_;
  std::vector<std::vector<Bottleneck<Scalar>>> stages_;
  std::vector<Index> widths_;
};

// --- DenseNet-201 ----------------------------------------------------------

template <typename Scalar>
class DenseLayer : public Module<Scalar> {
 public:
  DenseLayer(Index in, Index growth, Initializer& init)
      : bn1(in), bottleneck(conv(in, 4 * growth, 1), true, true, init), conv3(conv(4 * growth, growth, 3), init) {}

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) {
    Var<Scalar> h = conv3.forward(bottleneck.forward(relu(bn1.forward(x, phase)), phase));
    return concat_channels<Scalar>({x, h});
  }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    bn1.visit(v, join_name(prefix, "bn1"));
    bottleneck.visit(v, join_name(prefix, "conv1"));
    conv3.visit(v, join_name(prefix, "conv2"));
  }

  BatchNorm2d<Scalar> bn1;
  ConvBnAct<Scalar> bottleneck;
  Conv2d<Scalar> conv3;
};

template <typename Scalar>
class Transition : public Module<Scalar> {
 public:
  Transition(Index in, Index out, Initializer& init) : bn(in), reduce(conv(in, out, 1), init) {}

  Var<Scalar> forward(const Var<Scalar>& x, Phase phase) {
    return avg_pool2(reduce.forward(relu(bn.forward(x, phase))));
  }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    bn.visit(v, join_name(prefix, "bn"));
    reduce.visit(v, join_name(prefix, "conv"));
  }

  BatchNorm2d<Scalar> bn;
  Conv2d<Scalar> reduce;
};

template <typename Scalar>
class DenseNet201Encoder : public Encoder<Scalar> {
 public:
  DenseNet201Encoder(int depth, Index base, Initializer& init) : depth_(depth) {
    require_depth(depth, 5, "densenet201 encoder");
    static constexpr int kLayers[] = {6, 12, 48, 32};
    const Index growth = std::max<Index>(1, base / 2);
    stem_ = ConvBnAct<Scalar>(conv(3, 2 * growth, 7, 2), true, true, init);
    widths_ = {3, 2 * growth};
    Index in = 2 * growth;
    for (int s = 0; s + 2 <= depth; ++s) {
      if (s > 0) {
        transitions_.emplace_back(in, in / 2, init);
        in /= 2;
      }
      std::vector<DenseLayer<Scalar>> block;
      for (int l = 0; l < kLayers[s]; ++l) {
        block.emplace_back(in, growth, init);
        in += growth;
      }
      blocks_.push_back(std::move(block));
      widths_.push_back(in);
    }
  }

  EncoderFeatures<Scalar> forward(const Var<Scalar>& x, Phase phase) override {
    std::vector<Var<Scalar>> levels{x};
    Var<Scalar> h = stem_.forward(x, phase);
    levels.push_back(h);
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      h = s == 0 ? max_pool(h, 3, 2, 1) : transitions_[s - 1].forward(h, phase);
      for (auto& layer : blocks_[s]) h = layer.forward(h, phase);
      levels.push_back(h);
    }
    EncoderFeatures<Scalar> f;
    f.skips.assign(levels.begin(), levels.begin() + depth_);
    f.bottom = levels[static_cast<std::size_t>(depth_)];
    return f;
  }

  std::vector<Index> skip_channels() const override { return {widths_.begin(), widths_.begin() + depth_}; }
  Index bottom_channels() const override { return widths_[static_cast<std::size_t>(depth_)]; }
  Index input_channels() const override { return 3; }

  void visit(ParameterVisitor<Scalar>& v, const std::string& prefix) override {
    stem_.visit(v, join_name(prefix, "stem"));
    for (std::size_t s = 0; s < blocks_.size(); ++s) {
      if (s > 0) transitions_[s - 1].visit(v, join_name(prefix, "transition" + std::to_string(s)));
      for (std::size_t l = 0; l < blocks_[s].size(); ++l) {
        blocks_[s][l].visit(v, join_name(prefix, "dense" + std::to_string(s + 1) + "_layer" + std::to_string(l + 1)));
      }
    }
  }

 private:
  int depth_;
  ConvBnAct<Scalar> stem_;
  std::vector<Transition<Scalar>> transitions_;
  std::vector<std::vector<DenseLayer<Scalar>>> blocks_;
  std::vector<Index> widths_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_plain_encoder(BlockKind kind, int depth, Index base_width,
                                                    const BlockConfig& block, Initializer& init) {
  return std::make_unique<PlainEncoder<Scalar>>(kind, depth, base_width, block, init);
}

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_vgg19_encoder(int depth, Index base_width, bool batch_norm, Initializer& init) {
  return std::make_unique<Vgg19Encoder<Scalar>>(depth, base_width, batch_norm, init);
}

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_resnet152_encoder(int depth, Index base_width, Initializer& init) {
  return std::make_unique<ResNet152Encoder<Scalar>>(depth, base_width, init);
}

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_densenet201_encoder(int depth, Index base_width, Initializer& init) {
  return std::make_unique<DenseNet201Encoder<Scalar>>(depth, base_width, init);
}

#define TUMORSEG_INSTANTIATE(S)                                                                                 \
  template std::unique_ptr<Encoder<S>> make_plain_encoder(BlockKind, int, Index, const BlockConfig&,         \
                                                          Initializer&);                                      \
  template std::unique_ptr<Encoder<S>> make_vgg19_encoder(int, Index, bool, Initializer&);                    \
  template std::unique_ptr<Encoder<S>> make_resnet152_encoder(int, Index, Initializer&);                      \
  template std::unique_ptr<Encoder<S>> make_densenet201_encoder(int, Index, Initializer&);

TUMORSEG_INSTANTIATE(float)
TUMORSEG_INSTANTIATE(double)

}  // namespace tumorseg
