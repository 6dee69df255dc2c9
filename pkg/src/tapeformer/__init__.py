"""tapeformer: node classification on text-attributed citation graphs.

Combines cached LLM outputs (ranked predictions + explanations), hashed
text features, and dataset features into fused node embeddings, then
classifies nodes with a graph transformer whose attention is biased by
shortest-path distances, path edge features, and degree centrality.
"""

__version__ = "0.1.0"
