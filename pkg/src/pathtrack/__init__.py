"""Knowledge-graph retrieval engine for multi-hop question answering.

The engine works in three stages: an indexing stage that extracts a
knowledge graph and coreference table from a document corpus, a path
tracking stage that expands and prunes reasoning paths hop by hop, and a
completion stage that augments the path evidence with a second dense
retrieval pass.
"""

__version__ = "0.1.0"
