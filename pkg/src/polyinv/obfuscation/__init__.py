"""Obfuscated inference over polynomial networks and obfuscated remote MLP training."""
from .inference import (InferenceSession, LinkageReport, linkage_probe, open_session, session_element,
                        session_inference, session_to_dict)
from .mlp import (Dataset, MlpModel, MlpObfuscationSecret, dataset_from_dict, dataset_to_dict, forward,
                  identity_secret, init_mlp, mlp_from_dict, mlp_to_dict, obfuscate_dataset, obfuscate_mlp,
                  random_mlp, random_orthogonal, random_secret, recover_mlp, secret_from_dict,
                  secret_to_dict, synthetic_dataset)
from .training import (SgdConfig, TrainingDivergedError, TrainingLog, accuracy, log_softmax,
                       loss_and_grads, loss_value, train_sgd)
from .protocol import TrainingRun, max_param_diff, run_remote_training, server_train
