"""
Coordinated checkpoint and restart for distributed applications over a simulated content centric network.
"""
import logging


logger = logging.getLogger(__name__)
