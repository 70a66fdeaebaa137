import torchvision.transforms as transforms


def transform():
    return transforms.Compose([
        transforms.RandomPosterize(bits=4, p=0.5),
        transforms.Resize((64, 64)),
        transforms.ToTensor(),
        transforms.Normalize(mean=(0.4914, 0.4822, 0.4465), std=(0.247, 0.2435, 0.2616)),
    ])