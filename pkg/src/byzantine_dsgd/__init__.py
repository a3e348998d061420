"""Simulator and analysis toolkit for decentralized SGD under Byzantine attacks."""

__version__ = "0.1.0"
