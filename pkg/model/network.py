"""
LaneAwareGAT: BiLSTM encoder -> lane-biased attention layers -> Gaussian decoder heads.

Forward runs in four stages: every node's 30-frame history is encoded, the
anchor-frame graph drives attention, two attention layers refine the embeddings,
and one decoder per horizon reads the selected rows. With kinematic_prior = cv
the decoded means are offsets from the target's constant-velocity path.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from core.trajectory import HORIZONS
from graph.scene_graph import GraphSequence
from model.attention import LANE_BIAS, GATLayer
from model.decoder import GaussianDecoder, GaussianPrediction, to_prediction
from model.encoder import BiLSTMEncoder
from model.inputs import FeatureScaler, ModelInput, constant_velocity_path, scene_input
from model.params import Grads, ParamStore

ENCODER_PREFIX = "encoder."
KINEMATIC_PRIORS = ("cv", "none")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 6
    lstm_hidden: int = 64
    embed_dim: int = 128
    heads: int = 4
    head_dim: int = 32
    gat_layers: int = 2
    edge_dim: int = 5
    lane_bias_init: Tuple[float, ...] = (0.0, 0.0, 0.0, 1.0)
    decoder_hidden: int = 256
    leaky_slope: float = 0.2
    attention_variant: str = "gat"
    kinematic_prior: str = "cv"
    horizons: Tuple[Tuple[str, int], ...] = tuple(HORIZONS.items())

    def __post_init__(self):
        object.__setattr__(self, "lane_bias_init", tuple(float(v) for v in self.lane_bias_init))
        object.__setattr__(self, "horizons", tuple((str(h), int(s)) for h, s in self.horizons))
        if self.heads * self.head_dim != self.embed_dim:
            raise ValueError(f"heads * head_dim must equal embed_dim ({self.heads} * {self.head_dim} != {self.embed_dim})")
        if len(self.lane_bias_init) != 4:
            raise ValueError("lane_bias_init needs one value per lane code (4)")
        if self.edge_dim != 5:
            raise ValueError("edge_dim must be 5")
        if self.kinematic_prior not in KINEMATIC_PRIORS:
            raise ValueError(f"kinematic_prior must be one of {KINEMATIC_PRIORS}, got '{self.kinematic_prior}'")

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["lane_bias_init"] = list(self.lane_bias_init)
        payload["horizons"] = [[h, s] for h, s in self.horizons]
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ModelConfig":
        payload = dict(payload)
        if "horizons" in payload:
            payload["horizons"] = tuple(tuple(item) for item in payload["horizons"])
        return cls(**payload)

    @classmethod
    def from_config(cls, config) -> "ModelConfig":
        """Build from a ConfigManager."""
        return cls(
            input_dim=config["input_dim"],
            lstm_hidden=config["lstm_hidden"],
            embed_dim=config["embed_dim"],
            heads=config["heads"],
            head_dim=config["head_dim"],
            gat_layers=config["gat_layers"],
            edge_dim=config["edge_dim"],
            lane_bias_init=tuple(config["lane_bias_init"]),
            decoder_hidden=config["decoder_hidden"],
            leaky_slope=config["leaky_slope"],
            attention_variant=config["attention_variant"],
            kinematic_prior=config["kinematic_prior"],
        )


class LaneAwareGAT:
    """Parameters plus forward/backward over ModelInput tensors."""

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config or ModelConfig()
        c = self.config
        self.store = ParamStore()
        rng = np.random.default_rng(seed)

        self.encoder = BiLSTMEncoder(c.input_dim, c.lstm_hidden, c.embed_dim)
        self.encoder.init_params(self.store, rng)
        self.store.add(LANE_BIAS, np.asarray(c.lane_bias_init))
        self.layers: List[GATLayer] = []
        for index in range(1, c.gat_layers + 1):
            layer = GATLayer(index, c.embed_dim, c.heads, c.head_dim, c.edge_dim, c.attention_variant, c.leaky_slope)
            layer.init_params(self.store, rng)
            self.layers.append(layer)
        self.decoders: Dict[str, GaussianDecoder] = {}
        for horizon, steps in c.horizons:
            decoder = GaussianDecoder(horizon, steps, c.embed_dim, c.decoder_hidden)
            decoder.init_params(self.store, rng)
            self.decoders[horizon] = decoder

    @property
    def horizons(self) -> List[str]:
        return [h for h, _ in self.config.horizons]

    @property
    def lane_bias(self) -> np.ndarray:
        return self.store[LANE_BIAS]

    def freeze_encoder(self) -> List[str]:
        return self.store.freeze(ENCODER_PREFIX)

    def encoder_frozen(self) -> bool:
        return all(self.store.is_frozen(n) for n in self.store.names() if n.startswith(ENCODER_PREFIX))

    def count_parameters(self) -> int:
        return count_parameters(self.store)

    def forward(self, inp: ModelInput) -> Tuple[Dict[str, np.ndarray], tuple]:
        """
        Returns:
            ({horizon: (M, T_H, 5) channels for inp.decode_rows, log-sigma clipped}, cache)
        """
        x, enc_cache = self.encoder.forward(self.store, inp.histories)
        layer_caches = []
        for layer in self.layers:
            x, cache = layer.forward(self.store, x, inp.edge_src, inp.edge_dst, inp.edge_attr)
            layer_caches.append(cache)
        selected = x[inp.decode_rows]
        outputs, dec_caches = {}, {}
        for horizon, decoder in self.decoders.items():
            outputs[horizon], dec_caches[horizon] = decoder.forward(self.store, selected)
            if self.config.kinematic_prior == "cv":
                # means are offsets from the constant-velocity path; the shift has no parameters
                velocity = inp.anchor_velocity[inp.decode_rows]
                outputs[horizon][:, :, :2] += constant_velocity_path(velocity, decoder.steps)
        return outputs, (inp, x.shape, enc_cache, layer_caches, dec_caches)

    def backward(self, d_outputs: Mapping[str, np.ndarray], cache: tuple, grads: Grads) -> None:
        """Accumulate gradients of a scalar loss into `grads` (a ParamStore.zeros_like dict)."""
        inp, x_shape, enc_cache, layer_caches, dec_caches = cache
        d_selected = None
        for horizon, decoder in self.decoders.items():
            if horizon not in d_outputs:
                continue
            d = decoder.backward(self.store, d_outputs[horizon], dec_caches[horizon], grads)
            d_selected = d if d_selected is None else d_selected + d
        if d_selected is None:
            return
        d_x = np.zeros(x_shape)
        np.add.at(d_x, inp.decode_rows, d_selected)
        for layer, cache in zip(reversed(self.layers), reversed(layer_caches)):
            d_x = layer.backward(self.store, d_x, cache, grads)
        if not self.encoder_frozen():
            self.encoder.backward(self.store, d_x, enc_cache, grads)

    def predict(self, inp: ModelInput) -> List[Dict[str, GaussianPrediction]]:
        """One {horizon: GaussianPrediction} per decode row."""
        outputs, _ = self.forward(inp)
        return [
            {h: to_prediction(outputs[h][m]) for h in self.horizons}
            for m in range(len(inp.decode_rows))
        ]


def count_parameters(store: ParamStore) -> int:
    """Element count over non-frozen tensors."""
    return store.count(trainable_only=True)


def predict_sequence(model: LaneAwareGAT, sequence: GraphSequence, scaler: FeatureScaler,
                     vehicles: Optional[Iterable[int]] = None) -> Dict[int, Dict[str, GaussianPrediction]]:
    """
    Scene-level forward for one graph sequence.

    Args:
        model: Network
        sequence: 30-graph sequence ending at the anchor frame
        scaler: Standardization statistics from training
        vehicles: Vehicles to predict (default: the sequence targets)

    Returns:
        vehicle id -> horizon -> GaussianPrediction (displacements from the anchor)
    """
    decode = list(sequence.target_vehicles if vehicles is None else vehicles)
    inp = scene_input(sequence, scaler, decode)
    return dict(zip(decode, model.predict(inp)))
