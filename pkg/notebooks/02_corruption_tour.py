"""
A tour of the fourteen corruptions
==================================

Each corruption is a pure function of ``(image, severity, generator)``.
A :class:`CorruptionSpec` names the kind, the severity (1 to 5) and a seed,
so any corrupted image can be regenerated exactly.
"""

# %%
import numpy as np

from dcrobust.corruptions import (
    CorruptionSpec,
    apply_corruption,
    corruption_registry,
    pick_random_corruption,
    severity_table_text,
)
from dcrobust.synthetic import render_image

image = render_image(3, np.random.default_rng(7))
print("kinds:", ", ".join(corruption_registry()))
print(severity_table_text())

# %%
# Mean absolute change from the clean image, per kind and severity.
print(f"{'kind':18s}" + "".join(f"  s{s}   " for s in range(1, 6)))
for kind in corruption_registry():
    row = [np.abs(apply_corruption(image, CorruptionSpec(kind, s, seed=11)) - image).mean()
           for s in range(1, 6)]
    print(f"{kind:18s}" + "".join(f"{v:7.4f} " for v in row))

# %%
# Same spec, same output; outputs stay inside [0, 1].
spec = CorruptionSpec("frost", 4, seed=5)
a, b = apply_corruption(image, spec), apply_corruption(image, spec)
print("repeatable:", np.array_equal(a, b), " range:", a.min() >= 0 and a.max() <= 1)

# %%
# During enhancement every image draws its kind uniformly and a severity
# uniformly from 1..5.
rng = np.random.default_rng(0)
draws = [pick_random_corruption(rng) for _ in range(2800)]
kinds, counts = np.unique([d.kind for d in draws], return_counts=True)
print({str(k): int(c) for k, c in zip(kinds, counts)})

# %%
# Optional: save a contact sheet (needs Pillow, already a dependency).
from PIL import Image  # noqa: E402

sheet = np.concatenate([apply_corruption(image, CorruptionSpec(k, 3, seed=11))
                        for k in corruption_registry()], axis=1)
Image.fromarray((sheet * 255).round().astype(np.uint8)).save("corruption_sheet.png")
print("wrote corruption_sheet.png", sheet.shape)
