"""Remote training with a serialized boundary between data owner and server.

Everything the server sees passes through JSON text, so a transcript of the
exchanged messages is exactly what an outside observer of the channel gets.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from .mlp import (Dataset, MlpModel, MlpObfuscationSecret, dataset_from_dict, dataset_to_dict,
                  mlp_from_dict, mlp_to_dict, obfuscate_dataset, obfuscate_mlp, recover_mlp)
from .training import SgdConfig, train_sgd


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def server_train(params_msg: str, data_msg: str, cfg: SgdConfig) -> tuple[str, list[float]]:
    """The remote side: parse, train, serialize.  Sees only obfuscated values."""
    model = mlp_from_dict(json.loads(params_msg))
    data = dataset_from_dict(json.loads(data_msg))
    trained, log = train_sgd(model, data, cfg)
    return json.dumps(mlp_to_dict(trained)), log.epoch_loss


def max_param_diff(a: MlpModel, b: MlpModel) -> float:
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a.W + a.b, b.W + b.b))


@dataclass
class TrainingRun:
    recovered: MlpModel
    control: MlpModel | None
    transcript: dict[str, Any]


def run_remote_training(model: MlpModel, data: Dataset, secret: MlpObfuscationSecret, cfg: SgdConfig,
                        with_control: bool = True) -> TrainingRun:
    """Obfuscate, train remotely, recover; optionally train a plain control with the same seed."""
    params_msg = json.dumps(mlp_to_dict(obfuscate_mlp(model, secret)))
    data_msg = json.dumps(dataset_to_dict(obfuscate_dataset(data, secret)))
    trained_msg, server_loss = server_train(params_msg, data_msg, cfg)
    recovered = recover_mlp(mlp_from_dict(json.loads(trained_msg)), secret)
    round_trip = max_param_diff(recover_mlp(obfuscate_mlp(model, secret), secret), model)
    transcript: dict[str, Any] = {
        "messages": {"params_to_server_sha256": _digest(params_msg),
                     "data_to_server_sha256": _digest(data_msg),
                     "params_from_server_sha256": _digest(trained_msg)},
        "server_epoch_loss": server_loss,
        "round_trip_error": round_trip,
    }
    control = None
    if with_control:
        control, log = train_sgd(model, data, cfg)
        transcript["control_epoch_loss"] = log.epoch_loss
        transcript["recovered_vs_control"] = max_param_diff(recovered, control)
        transcript["prediction_gap"] = float(np.max(np.abs(recovered(data.inputs) - control(data.inputs))))
    return TrainingRun(recovered, control, transcript)
