"""lakf test suite"""
