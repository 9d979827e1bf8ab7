"""treecap: hierarchical concept prototypes for desk-scale caption training.

Subpackages: autodiff (tensor math + reverse mode), lexicon (vocab and
embeddings), prototypes (hierarchical clustering), model (CMA stack +
decoder), training (XE + SCST), metrics (CIDEr-D / BLEU), synthetic
(verification worlds), cli (command-line surface).
"""

__version__ = "0.1.0"
