"""Text-to-model hypernetworks.

A hypernetwork reads a set of k class-descriptor vectors and emits the
weights of a standalone k-class classifier. The equivariant architecture
guarantees that permuting the descriptors permutes the classifier outputs.
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
