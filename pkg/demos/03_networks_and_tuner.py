"""
Backbone, extractor and tuner
=============================

The diffusion network and the segmentation extractor share one U-Net
layout, so their skip features line up level by level.  Extractor features
from all five depths are blended with fixed depth weights and injected into
the diffusion skips through a small bottleneck tuner.
"""
import torch

from morphdiff.backbone import BackboneConfig, UNet
from morphdiff.conditioning import DEFAULT_DEPTH_WEIGHTS, DepthWeights, Tuner, extract_conditions, tuner_apply

cfg = BackboneConfig(image_size=32, base_channels=16, num_res_blocks=1)
torch.manual_seed(0)
diffusion = UNet(cfg, "diffusion")
extractor = UNet(cfg.role_variant("extractor"), "extractor")
tuner = Tuner.for_backbone(diffusion)

print("skip shapes (C, H, W):", cfg.skip_shapes())
print(f"diffusion params {diffusion.num_parameters():,}, extractor params {extractor.num_parameters():,}")
print(f"tuner params {tuner.num_parameters():,} "
      f"({100 * tuner.num_parameters() / diffusion.num_parameters():.2f}% of the backbone)")

full = UNet(BackboneConfig(), "diffusion")
print(f"at the default 256 px config the tuner is "
      f"{100 * Tuner.for_backbone(full).num_parameters() / full.num_parameters():.2f}% of the backbone")

# the default weights sum to 0.999 and are renormalised on load
print("depth weights:", DEFAULT_DEPTH_WEIGHTS, "->", tuple(round(w, 4) for w in DepthWeights()))

stack = torch.rand(5, 32, 32)
cond = extract_conditions(extractor, stack, DepthWeights())
x_t = torch.randn(1, 1, 32, 32)
with torch.no_grad():
    plain, _ = diffusion(x_t, 500)
    steered, _ = diffusion(x_t, 500, conditions=cond, tuner=tuner, skip_mode="residual")
# the up-projection starts at zero, so the tuner term itself is silent before
# training; the output still moves because the blended decoder features are added
with torch.no_grad():
    _, pyr = diffusion(x_t, 500)
    silent = tuner_apply(pyr.encoder(1), cond.encoder(1), tuner, 1)
print("untrained tuner term:", float(silent.abs().max()))
print("output change from conditioning:", float((plain - steered).abs().max()))
