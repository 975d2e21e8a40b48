"""embedatlas: layered atlases of embedding spaces.

Pipeline: ingest embeddings -> project to 2D -> build the representative
tile pyramid -> index for cosine search -> serve over HTTP.
"""

__version__ = "0.1.0"
