#pragma once

#include <string>
#include <vector>

#include "bsprune/graph.hpp"
#include "bsprune/rng.hpp"

namespace bsprune {

struct ExplicitLayer {
    std::string kind;  // conv | bn | relu | maxpool | avgpool | global_avg_pool | dense
    int filters = 0;
    int kh = 3, kw = 3;
    int stride = 1;
    Padding padding = Padding::same;
    bool bias = true;
    int units = 0;  // dense
};

struct ArchSpec {
    std::string template_name;  // vgg16 | densenet121 | resnet50 | tiny_vgg | tiny_resnet | tiny_densenet
    std::vector<ExplicitLayer> layers;  // used when template_name is empty
    ActShape input{0, 0, 0};
    int num_classes = 10;
};

/// Parse the architecture config schema: a JSON object with `format: 1`,
/// either `template` or `layers[]`, plus `input: [h,w,c]` and `num_classes`.
ArchSpec parse_arch_config(const std::string& json_text);
ArchSpec load_arch_config(const std::string& path);

/// Constructs the model graph with seeded He-normal weights and a
/// gap + dense classifier head.
NetGraph build_architecture(const ArchSpec& spec, Rng& rng);

/// Truncates after the last conv layer's trailing BN/activation chain,
/// appends global average pooling plus a fresh dense classifier, inserts a
/// BN after any conv that has none adjacent, and marks BN + dense (and any
/// existing scaling vectors) as the trainable set.
void replace_head(NetGraph& g, int num_classes, Rng& rng);

bool is_known_template(const std::string& name);

}  // namespace bsprune
