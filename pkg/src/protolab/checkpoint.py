"""Checkpoint container: one zip with a JSON descriptor and raw arrays.

The layout is fully deterministic — fixed member order, fixed zip metadata
timestamps, stored (uncompressed) entries — so saving the same model twice
produces byte-identical files, and a load/save round trip preserves every
parameter bit. Arrays are written in their stored dtype as little-endian
raw bytes; shapes and dtypes live in the descriptor.
"""
from __future__ import annotations

import json
import zipfile

import numpy as np

from .errors import ConfigurationError
from .model import (
    ClassHead,
    ConceptLayer,
    EncoderDescriptor,
    EncoderParams,
    ModelParams,
    PrototypeBank,
    model_arrays,
)

SCHEMA_VERSION = 1
FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    zi = zipfile.ZipInfo(name, date_time=FIXED_DATE)
    zi.create_system = 3
    zi.external_attr = 0o644 << 16
    zi.compress_type = zipfile.ZIP_STORED
    return zi


def save_checkpoint(params: ModelParams, path: str) -> None:
    arrays = model_arrays(params)
    desc = params.encoder.descriptor
    descriptor = {
        "schema_version": SCHEMA_VERSION,
        "variant": params.variant,
        "n_classes": params.n_classes,
        "class_names": list(params.class_names),
        "encoder": {
            "channels": desc.channels,
            "height": desc.height,
            "width": desc.width,
            "patch_h": desc.patch_h,
            "patch_w": desc.patch_w,
            "d_hidden": desc.d_hidden,
            "d_out": desc.d_out,
            "seed": params.encoder.seed,
        },
        "arrays": [
            {"name": k, "shape": list(v.shape), "dtype": np.dtype(v.dtype).str}
            for k, v in arrays.items()
        ],
        "bank": None
        if params.bank is None
        else {
            "token_count": params.bank.token_count,
            "class_assignment": None
            if params.bank.class_assignment is None
            else [int(c) for c in params.bank.class_assignment],
            "provenance": params.bank.provenance,
        },
        "has_concept": params.concept is not None,
        "head_bias": params.head.bias is not None,
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("descriptor.json"), json.dumps(descriptor, indent=2, sort_keys=True))
        for name, arr in arrays.items():
            little = np.ascontiguousarray(arr).astype(np.dtype(arr.dtype).newbyteorder("<"))
            zf.writestr(_member(f"arrays/{name}.bin"), little.tobytes())


def load_checkpoint(path: str) -> ModelParams:
    try:
        with zipfile.ZipFile(path) as zf:
            descriptor = json.loads(zf.read("descriptor.json"))
            raw = {
                spec["name"]: np.frombuffer(
                    zf.read(f"arrays/{spec['name']}.bin"), dtype=np.dtype(spec["dtype"])
                ).reshape(spec["shape"]).copy()
                for spec in descriptor["arrays"]
            }
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"invalid checkpoint {path}: {exc}") from exc

    enc_info = descriptor["encoder"]
    desc = EncoderDescriptor(
        channels=enc_info["channels"],
        height=enc_info["height"],
        width=enc_info["width"],
        patch_h=enc_info["patch_h"],
        patch_w=enc_info["patch_w"],
        d_hidden=enc_info["d_hidden"],
        d_out=enc_info["d_out"],
    )
    encoder = EncoderParams(
        descriptor=desc,
        arrays={k.split(".", 1)[1]: v for k, v in raw.items() if k.startswith("encoder.")},
        seed=enc_info["seed"],
    )
    bank = None
    if descriptor["bank"] is not None:
        info = descriptor["bank"]
        bank = PrototypeBank(
            prototypes=raw["bank.prototypes"],
            token_count=info["token_count"],
            class_assignment=None
            if info["class_assignment"] is None
            else np.asarray(info["class_assignment"], dtype=np.int64),
            provenance=info["provenance"],
        )
    concept = None
    if descriptor["has_concept"]:
        concept = ConceptLayer(weights=raw["concept.W"], bias=raw["concept.b"])
    head = ClassHead(
        weights=raw["head.W"],
        bias=raw["head.b"] if descriptor["head_bias"] else None,
    )
    return ModelParams(
        encoder=encoder,
        bank=bank,
        concept=concept,
        head=head,
        variant=descriptor["variant"],
        n_classes=descriptor["n_classes"],
        class_names=tuple(descriptor["class_names"]),
    )
