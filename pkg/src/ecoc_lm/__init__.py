"""Language models with error-correcting output code decoders.

Each vocabulary token owns a contiguous interval of the ``n_bits`` code space.
The network predicts bits independently; a token's probability is the mass
(or best codeword) of its interval under that factorial distribution.
"""

from .codebook import Codebook, Codeword, build_codebook, load_codebook, save_codebook
from .config import RunConfig
from .network import LanguageModel

__all__ = ["Codebook", "Codeword", "LanguageModel", "RunConfig", "build_codebook",
           "load_codebook", "save_codebook"]
__version__ = "0.1.0"
