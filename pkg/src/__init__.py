# CSI localizer package
