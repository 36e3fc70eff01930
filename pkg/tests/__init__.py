"""Tests for the pit_operator package"""
