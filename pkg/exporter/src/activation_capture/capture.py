from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


class CaptureError(Exception):
    pass


class LayerNotFound(CaptureError):
    pass


class ShapeDrift(CaptureError):
    pass


class DuplicateSample(CaptureError):
    pass


class EmptyCapture(CaptureError):
    pass


@dataclass
class CaptureConfig:
    layer: str  # dotted module name inside the host model
    out_dir: Path
    manifest_path: Path | None = None  # default: <out_dir>/manifest.jsonl
    element_type: str = "float32"
    save_patches: bool = True  # also store the input patch for later rendering

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.manifest_path is None:
            self.manifest_path = self.out_dir / "manifest.jsonl"
        if self.element_type != "float32":
            raise CaptureError("only float32 capture is supported")

    @classmethod
    def from_json(cls, path: str | Path) -> "CaptureConfig":
        """Load {"layer": ..., "out_dir": ..., ...} from a config file."""
        payload = json.loads(Path(path).read_text())
        return cls(**payload)


class ActivationCapture:
    """Forward-hook recorder for one named layer of a torch model.

    Usage::

        capture = ActivationCapture(model, CaptureConfig("features.1", out))
        for patch, meta in samples:
            capture.capture_sample(patch, meta)
        manifest = capture.finalize_manifest()
        capture.close()
    """

    def __init__(self, model: torch.nn.Module, config: CaptureConfig):
        self.model = model
        self.config = config
        self._grabbed: torch.Tensor | None = None
        self._shape: tuple[int, ...] | None = None
        self._seen: set[str] = set()
        self._lines: list[str] = []

        modules = dict(model.named_modules())
        if config.layer not in modules or config.layer == "":
            available = sorted(name for name in modules if name)
            raise LayerNotFound(
                f"layer {config.layer!r} not in model; available: {available}"
            )
        self._hook = modules[config.layer].register_forward_hook(self._grab)

        (config.out_dir / "activations").mkdir(parents=True, exist_ok=True)
        if config.save_patches:
            (config.out_dir / "patches").mkdir(exist_ok=True)

    def _grab(self, module, args, output) -> None:
        self._grabbed = output.detach()

    def capture_sample(self, patch: torch.Tensor, metadata: dict) -> dict:
        """Run one patch through the model; write its activation file.

        ``metadata`` needs sample_id, vertebra_label, fractured, and
        optionally split (default "all"). Returns the manifest record.
        """
        sample_id = metadata["sample_id"]
        if sample_id in self._seen:
            raise DuplicateSample(f"sample_id {sample_id!r} already captured")

        if patch.dim() == 3:
            batch = patch[None, None]
        elif patch.dim() == 4:
            batch = patch[None]
        else:
            raise CaptureError(f"expected a 3D patch, got {tuple(patch.shape)}")

        self._grabbed = None
        self.model.eval()
        with torch.no_grad():
            logit = self.model(batch)
        if self._grabbed is None:
            raise CaptureError("hooked layer did not fire during the forward pass")

        units = self._grabbed
        if units.dim() == 5:  # (1, K, D', H', W')
            units = units[0]
        if units.dim() != 4:
            raise ShapeDrift(f"captured activation has shape {tuple(units.shape)}")
        shape = tuple(units.shape)
        if self._shape is None:
            self._shape = shape
        elif shape != self._shape:
            raise ShapeDrift(f"activation shape drifted: {shape} vs {self._shape}")

        activation_rel = f"activations/{sample_id}.npy"
        np.save(
            self.config.out_dir / activation_rel,
            units.cpu().numpy().astype(np.float32),
        )

        patch_rel = None
        if self.config.save_patches:
            patch_rel = f"patches/{sample_id}.npy"
            np.save(
                self.config.out_dir / patch_rel,
                patch.detach().cpu().numpy().astype(np.float32),
            )

        prob = float(torch.sigmoid(logit.reshape(())).item())
        record = {
            "sample_id": sample_id,
            "vertebra_label": metadata["vertebra_label"],
            "fractured": bool(metadata["fractured"]),
            "predicted_prob": prob,
            "activation_path": activation_rel,
            "patch_path": patch_rel,
            "split": metadata.get("split", "all"),
        }
        self._seen.add(sample_id)
        self._lines.append(json.dumps(record))
        return record

    def finalize_manifest(self) -> Path:
        """Write every captured record as JSON-Lines; needs >= 1 capture."""
        if not self._lines:
            raise EmptyCapture("no samples captured")
        self.config.manifest_path.write_text("\n".join(self._lines) + "\n")
        return self.config.manifest_path

    def close(self) -> None:
        self._hook.remove()
