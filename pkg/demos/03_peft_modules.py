"""The three adapter families and the freeze plans that budget them.

Shows the two properties the whole approach leans on: fresh adapters are
exact identities (training starts from the pretrained function), and a
freeze plan caps the trainable surface at a few percent of the model.
"""

import numpy as np

from peftlab import trainer
from peftlab.model import forward_pair
from peftlab.peft import (
    attach_bottleneck,
    attach_lora,
    count_trainable,
    make_freeze_plan,
    merge_lora,
)
from peftlab.trainer import RunConfig


def main():
    cfg = RunConfig()
    rng = np.random.default_rng(7)
    a = rng.integers(0, cfg.model.vocab_size, size=6).tolist()
    b = rng.integers(0, cfg.model.vocab_size, size=5).tolist()

    base = trainer.build_model(cfg)
    base_out = forward_pair(base, a, b).data

    # zero-init identity: B = 0 makes the LoRA delta vanish at attach time
    lora_model = trainer.build_model(cfg)
    attach_lora(lora_model, rank=4)
    diff = np.abs(forward_pair(lora_model, a, b).data - base_out).max()
    print(f"fresh LoRA changes the forward by {diff:.1e}")

    adapter_model = trainer.build_model(cfg)
    attach_bottleneck(adapter_model, m=8)
    diff = np.abs(forward_pair(adapter_model, a, b).data - base_out).max()
    print(f"fresh bottleneck adapter changes it by {diff:.1e}")

    # after training, LoRA folds into the base weights with no adapter left
    lora = lora_model.loras["block.0.attn.wq"]
    lora.B.data = rng.normal(0.0, 0.05, size=lora.B.data.shape)
    before = forward_pair(lora_model, a, b).data
    merge_lora(lora_model)
    after = forward_pair(lora_model, a, b).data
    print(f"merge shifts outputs by {np.abs(after - before).max():.1e} "
          f"({len(lora_model.loras)} adapters remain)")

    # freeze plans: what actually receives gradients
    model = trainer.build_model(cfg)
    trainer.attach_modules(cfg, model)
    full = count_trainable(model, make_freeze_plan(model, "full"))
    print("\ntrainable parameters by plan:")
    for mode in ("full", "head_only", "adapters_only", "adapters_plus_prompt"):
        n = count_trainable(model, make_freeze_plan(model, mode))
        print(f"  {mode:22s} {n:6d}  ({n / full:7.2%} of full)")


if __name__ == "__main__":
    main()
