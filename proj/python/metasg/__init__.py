# Copyright 2026 The metasg Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Python interface to the metasg sampling toolkit."""

from ._metasg import (  # noqa: F401
    CalibrationError,
    ConfigError,
    ContractError,
    DivergenceError,
    EnergyModel,
    GaussianTarget,
    IngestionError,
    MetaNets,
    NumericError,
    Rng,
    TrainingError,
    adam_step,
    baseline_step,
    ess,
    fit_gaussian_kl,
    make_meta_nets,
    meta_train,
    nnsghmc_step,
    preset_config,
    preset_names,
    run_sampler,
    stein_score,
)

__version__ = "0.1.0"
