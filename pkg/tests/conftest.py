"""
Pytest configuration and shared fixtures for test setup.
"""
import logging
import tempfile
import unittest
from dataclasses import replace
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import numpy as np

from client import ClientHyper, ClientState
from datagen import UniverseConfig, generate_universe
from encoders import EncoderConfig, PretrainConfig, init_pretrained
from evaluation import EvaluationConfig
from experiments import ExperimentConfig, PresetConfig
from losses import LossSettings
from server import RoundConfig
from convergence_monitor import MonitorConfig


class TestConfig(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.universe_config = cls.setup_universe_config()
        cls.encoder_config = EncoderConfig(input_dim=6, hidden_dims=(8,), embed_dim=4)
        cls.pretrain_config = PretrainConfig(epochs=3, learning_rate=0.05, batch_size=16)
        cls.universe = generate_universe(cls.universe_config)
        cls.psi = init_pretrained(
            cls.universe_config.seed, cls.encoder_config, cls.universe.public_pool, cls.pretrain_config
        )
        cls.hyper = ClientHyper(
            learning_rate=5e-3, local_epochs=1, batch_size=4, loss=LossSettings(k=2)
        )

    @classmethod
    def setup_universe_config(cls):
        return UniverseConfig(
            num_clients=6,
            samples_per_identity=10,
            input_dim=6,
            intra_class_noise=0.5,
            inter_class_separation=3.0,
            public_pool_identities=5,
            impostor_fraction=0.4,
            nuisance_dim=0,
            seed=3,
        )

    def setUp(self):
        # Suppress print statements
        self.held_output = StringIO()
        self.patcher = patch("sys.stdout", self.held_output)
        self.patcher.start()
        logging.disable(logging.CRITICAL)

    def tearDown(self):
        self.patcher.stop()
        logging.disable(logging.NOTSET)

    def make_states(self, hyper=None, init=None):
        init = init or self.psi
        return [
            ClientState(d.client_id, init, init, d, hyper or self.hyper)
            for d in self.universe.clients
        ]

    def small_experiment_config(self, output_dir, **overrides) -> ExperimentConfig:
        config = ExperimentConfig(
            output_dir=str(output_dir),
            universe=self.universe_config,
            encoder=self.encoder_config,
            pretrain=self.pretrain_config,
            client=self.hyper,
            rounds=RoundConfig(total_rounds=2, participation_rate=0.5),
            evaluation=EvaluationConfig(fpir_points=(0.5, 0.1), negative_pairs=200),
            monitor=MonitorConfig(probes=3, radius=0.05),
            presets=PresetConfig(seeds=(1, 2), sweep_rates=(0.2, 1.0)),
            parallelism=2,
            emit_svg=False,
        )
        return replace(config, **overrides)

    def temporary_directory(self) -> Path:
        handle = tempfile.TemporaryDirectory()
        self.addCleanup(handle.cleanup)
        return Path(handle.name)

    @staticmethod
    def random_scores(rng, size):
        return np.round(rng.uniform(-1.0, 1.0, size=size), 1)
